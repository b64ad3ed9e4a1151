// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance                 run every criterion
//   acceptance --criterion N   run one; exit status is 0 only on PASS

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedilc/aggregation.hpp"
#include "fedilc/analysis.hpp"
#include "fedilc/cli.hpp"
#include "fedilc/datasets.hpp"
#include "fedilc/federation.hpp"
#include "fedilc/metrics.hpp"
#include "fedilc/random.hpp"
#include "oracles.hpp"

using namespace fedilc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fedilc_acceptance_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "fedilc");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::streambuf* saved = std::cout.rdbuf();
    std::ostringstream sink;
    std::cout.rdbuf(sink.rdbuf());
    const int rc = cli_main(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(saved);
    return rc;
}

// Every regular file under dir, keyed by relative path.
std::vector<std::pair<std::string, std::string>> tree(const fs::path& dir) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), dir).string(), slurp(e.path()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

Outcome criterion1() {
    const auto t0 = Clock::now();
    Rng rng(0xacce55);
    double worst = 0.0;
    std::size_t coords = 0;
    std::size_t zeros = 0;
    std::size_t all_negative = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const auto g = oracle::random_gradient_set(rng);
        std::vector<std::span<const double>> views(g.begin(), g.end());
        const auto got = weighted_geo_mean(views);
        for (std::size_t k = 0; k < got.size(); ++k) {
            std::vector<double> col;
            for (const auto& e : g) col.push_back(e[k]);
            zeros += std::count(col.begin(), col.end(), 0.0) > 0 ? 1 : 0;
            all_negative += std::all_of(col.begin(), col.end(), [](double x) { return x < 0.0; }) ? 1 : 0;
            const auto want = oracle::geo_mean_coord(col);
            if (want.scale > 0.0) worst = std::max(worst, std::abs(got[k] - want.value) / want.scale);
            else if (got[k] != 0.0) worst = INFINITY;
            ++coords;
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-12 && secs < 10.0 && zeros > 0 && all_negative > 0,
            fmt("10000 sets, %zu coords (%zu with zeros, %zu all-negative), max rel err %.3g, %.2fs", coords, zeros,
                all_negative, worst, secs)};
}

Outcome criterion2() {
    const auto t0 = Clock::now();
    const ModelSpec spec{{4, 8, 1}};
    ParamVector p = init_params(spec, 2);
    Rng rng(3);
    Batch b;
    b.inputs = Matrix(32, 4);
    for (double& x : b.inputs.values()) x = rng.normal();
    for (int i = 0; i < 32; ++i) b.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    std::vector<double> target(spec.head_size());
    for (double& t : target) t = rng.uniform(0.0, 0.02);

    auto rel = [](double fd, double an) { return std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)); };
    const double h = 1e-5;
    const ParamVector g = backward_full(spec, p, b);
    double worst_full = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p.values()[i];
        p.values()[i] = saved + h;
        const double up = compute_loss(forward(spec, p, b.inputs).logits, b.labels, spec.head);
        p.values()[i] = saved - h;
        const double down = compute_loss(forward(spec, p, b.inputs).logits, b.labels, spec.head);
        p.values()[i] = saved;
        worst_full = std::max(worst_full, rel((up - down) / (2 * h), g.values()[i]));
    }
    const auto pg = fishr_penalty_grad(spec, p, b, target);
    double worst_pen = 0.0;
    for (std::size_t c = 0; c < spec.head_size(); ++c) {
        double& w = p.head_block()[c];
        const double saved = w;
        w = saved + h;
        const double up = fishr_penalty(spec, forward(spec, p, b.inputs), b.labels, target);
        w = saved - h;
        const double down = fishr_penalty(spec, forward(spec, p, b.inputs), b.labels, target);
        w = saved;
        worst_pen = std::max(worst_pen, rel((up - down) / (2 * h), pg[c]));
    }
    const double secs = seconds_since(t0);
    return {worst_full < 1e-4 && worst_pen < 1e-3 && secs < 5.0,
            fmt("backward_full max rel err %.3g, fishr_penalty_grad %.3g, %.2fs", worst_full, worst_pen, secs)};
}

Outcome criterion3() {
    const std::vector<VarianceDiag> same{{{0.4, 1.25, 3.0}, 8}, {{0.4, 1.25, 3.0}, 8}, {{0.4, 1.25, 3.0}, 8}};
    const std::vector<VarianceDiag> hand{{{1.0, 0.0}, 2}, {{0.0, 1.0}, 2}};
    const double a = fishr_loss(same);
    const double b = fishr_loss(hand);
    return {a == 0.0 && b == 0.5, fmt("identical -> %.17g, [1,0]/[0,1] -> %.17g", a, b)};
}

Outcome criterion4() {
    auto diag = [](double x, double y) {
        QuadEnv q;
        q.hessian = Matrix(2, 2);
        q.hessian(0, 0) = x;
        q.hessian(1, 1) = y;
        q.theta_star = {0.0, 0.0};
        return q;
    };
    const double eps = 0.37;
    const double same = inconsistency_score(diag(1, 1), diag(1, 1), eps);
    const double four = inconsistency_score(diag(1, 1), diag(4, 1), 1.0);
    bool direction = true;
    std::string scores;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const CurvatureToy toy = mismatched_curvature_toy(seed);
        const auto r = compare_minimizer_consistency(toy.a, toy.b, toy.start, 2000, 0.05, 1.0);
        direction = direction && r.score_geo <= r.score_arith;
        scores += fmt(" %.3g/%.3g", r.score_geo, r.score_arith);
    }
    return {same == eps && std::abs(four - 4.0) <= 1e-12 && direction,
            fmt("identical -> %.17g (eps %.2f), diag(1,1) vs diag(4,1) -> %.17g, toy geo/arith:", same, eps, four) +
                scores};
}

ExperimentConfig spurious_config(AlgoMode mode) {
    ExperimentConfig c;
    c.dataset = DatasetKind::synth_spurious;
    c.mode = mode;
    c.rounds = 200;
    c.batch_size = 64;
    c.geo_chunk = 8;
    c.lr = 0.01;
    c.weight_decay = 0.0;
    c.lambda = 1.0;
    c.hidden = std::vector<std::size_t>{32};
    c.seeds = {0, 1, 2, 3, 4};
    c.n_per_silo = 1000;
    c.d_inv = 10;
    c.flip_probs = {0.15, 0.30, 0.45, 0.60, 0.75};
    c.ood_flip = 0.90;
    c.finalize();
    return c;
}

double mean_min_ood(const std::vector<RoundLog>& logs) {
    double s = 0.0;
    for (const auto& l : logs) s += l.best_round().ood.loss;
    return s / static_cast<double>(logs.size());
}

Outcome criterion5() {
    const auto t0 = Clock::now();
    double loss[3] = {};
    const AlgoMode modes[3] = {AlgoMode::fed_sgd, AlgoMode::fishr_inter_geo, AlgoMode::fishr_intra_geo};
    for (int i = 0; i < 3; ++i) {
        const ExperimentConfig c = spurious_config(modes[i]);
        const FederationDataset data = build_dataset(c);
        const ModelSpec spec = model_for(c, data);
        if (spec.layer_sizes != std::vector<std::size_t>{11, 32, 1}) return {false, "unexpected model shape"};
        loss[i] = mean_min_ood(run_seeds(c, data, spec));
    }
    const double secs = seconds_since(t0);
    return {loss[1] < loss[0] && loss[2] < loss[0] && secs < 300.0,
            fmt("mean min OOD loss fed_sgd %.6f, fishr_inter_geo %.6f, fishr_intra_geo %.6f, %.1fs", loss[0], loss[1],
                loss[2], secs)};
}

Outcome criterion6() {
    const auto t0 = Clock::now();
    double loss[2] = {};
    const AlgoMode modes[2] = {AlgoMode::fed_sgd, AlgoMode::fishr_inter_geo};
    for (int i = 0; i < 2; ++i) {
        ExperimentConfig c;
        c.dataset = DatasetKind::color_digits;
        c.mode = modes[i];
        c.rounds = 100;
        c.batch_size = 64;
        c.seeds = {0, 1, 2, 3, 4};
        try {
            c.finalize();
        } catch (const ConfigError& e) {
            return {false, std::string("MNIST files unavailable: ") + e.what()};
        }
        const FederationDataset data = build_dataset(c);
        const ModelSpec spec = model_for(c, data);
        loss[i] = mean_min_ood(run_seeds(c, data, spec));
    }
    const double secs = seconds_since(t0);
    const bool a = loss[1] < loss[0];
    // Reference OOD losses for this configuration; within 0.05 is best effort.
    const double ref_fed_sgd = 0.566;
    const double ref_inter_geo = 0.542;
    const bool b = std::abs(loss[0] - ref_fed_sgd) <= 0.05 && std::abs(loss[1] - ref_inter_geo) <= 0.05;
    return {a && secs < 1800.0, fmt("mean min OOD loss fed_sgd %.4f, fishr_inter_geo %.4f; (a) %s, (b) %s, %.0fs",
                                    loss[0], loss[1], a ? "met" : "not met", b ? "met" : "not met", secs)};
}

Outcome criterion7() {
    const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
    const std::vector<int> y{1, 0, 1, 0};
    bool hand = auroc(s, y) == 0.75 && auprc(s, y) == 0.5 + 0.5 * (2.0 / 3.0) &&
                auprc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 0, 0}) == 0.25;
    Rng rng(7);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(49);
        std::vector<double> sc(n);
        std::vector<int> lb(n);
        for (std::size_t i = 0; i < n; ++i) {
            sc[i] = rng.bernoulli(0.5) ? static_cast<double>(rng.below(6)) / 6.0 : rng.uniform();
            lb[i] = rng.bernoulli(0.5) ? 1 : 0;
        }
        const auto pos = std::count(lb.begin(), lb.end(), 1);
        if (pos == 0 || pos == static_cast<std::ptrdiff_t>(n)) lb[0] = 1 - lb[0];
        if (auroc(sc, lb) != oracle::auroc_pairs(sc, lb) || auprc(sc, lb) != oracle::auprc_steps(sc, lb)) ++mismatches;
    }
    return {hand && mismatches == 0, fmt("hand cases %s, %zu/1000 random instances differ from the oracle",
                                         hand ? "match" : "differ", mismatches)};
}

Outcome criterion8() {
    const auto u = fairness_stats(std::vector<double>{0.8, 0.8, 0.8, 0.8});
    const auto t = fairness_stats(std::vector<double>{1.0, 0.5});
    // Normalized accuracies (2/3, 1/3) against uniform (1/2, 1/2).
    const double kl_closed = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
    const bool ok = u.variance == 0.0 && std::abs(u.kl) <= 1e-9 && std::abs(t.variance - 0.0625) <= 1e-9 &&
                    std::abs(t.kl - kl_closed) <= 1e-9;
    return {ok, fmt("uniform -> (%.3g, %.3g), [1.0,0.5] -> variance %.12g, KL %.12g", u.variance, u.kl, t.variance,
                    t.kl)};
}

std::string shell_quote(const std::string& s) { return "'" + s + "'"; }

Outcome criterion9(const std::string& exe) {
    const auto t0 = Clock::now();
    const fs::path root = scratch("wire");
    std::string detail;
    bool ok = true;
    for (const char* mode : {"fed_sgd", "fishr_inter_geo", "fishr_intra_geo"}) {
        const std::string common = std::string(" --dataset synth_spurious --algo ") + mode +
                                   " --rounds 10 --seeds 3,4 --set n_per_silo=200";
        const fs::path local = root / (std::string(mode) + "_local");
        const fs::path remote = root / (std::string(mode) + "_wire");
        if (std::system((shell_quote(exe) + common + " --out " + shell_quote(local.string()) + " > /dev/null").c_str()) != 0) {
            return {false, std::string("in-process run failed for ") + mode};
        }
        const std::string serve = shell_quote(exe) + common + " --serve --port 0 --out " + shell_quote(remote.string());
        FILE* server = ::popen(serve.c_str(), "r");
        if (!server) return {false, "cannot start server"};
        std::array<char, 512> line{};
        if (!std::fgets(line.data(), line.size(), server)) {
            ::pclose(server);
            return {false, std::string("server printed nothing for ") + mode};
        }
        const std::string text(line.data());
        const auto colon = text.find(':');
        const int port = std::atoi(text.c_str() + colon + 1);
        const std::size_t silos = 5;
        for (std::size_t k = 0; k < silos; ++k) {
            const std::string client = shell_quote(exe) + " --connect 127.0.0.1:" + std::to_string(port) + " --silo " +
                                       shell_quote((remote / "silos" / ("silo_" + std::to_string(k) + ".csv")).string()) +
                                       " --client-id " + std::to_string(k) + " > /dev/null 2>&1 &";
            if (std::system(client.c_str()) != 0) return {false, "cannot start client " + std::to_string(k)};
        }
        while (std::fgets(line.data(), line.size(), server)) {
        }
        if (::pclose(server) != 0) return {false, std::string("server failed for ") + mode};
        for (const char* f : {"rounds_seed3.csv", "rounds_seed4.csv"}) {
            const bool same = fs::exists(remote / f) && slurp(local / f) == slurp(remote / f);
            ok = ok && same;
            detail += std::string(" ") + mode + "/" + f + (same ? " identical;" : " DIFFERS;");
        }
    }
    const double secs = seconds_since(t0);
    return {ok, fmt("%.1fs:", secs) + detail};
}

Outcome criterion10(bool have_mnist) {
    const fs::path root = scratch("determinism");
    // A clinical CSV to exercise the file loader.
    {
        std::ofstream csv(root / "clinical.csv");
        csv << "hospital_id,label";
        for (int f = 0; f < 12; ++f) csv << ",f" << f;
        csv << "\n";
        Rng rng(11);
        for (int r = 0; r < 600; ++r) {
            csv << "h" << rng.below(8) << "," << (rng.bernoulli(0.3) ? 1 : 0);
            for (int f = 0; f < 12; ++f) csv << "," << (rng.bernoulli(0.2) ? 1 : 0);
            csv << "\n";
        }
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> runs;
    for (AlgoMode m : all_algo_modes()) {
        runs.push_back({std::string("spurious_") + std::string(to_string(m)),
                        {"--dataset", "synth_spurious", "--algo", std::string(to_string(m)), "--rounds", "5", "--seeds",
                         "0,1,2", "--set", "n_per_silo=200"}});
    }
    runs.push_back({"clinical", {"--dataset", "synth_clinical", "--algo", "fishr_inter_geo", "--rounds", "3", "--seeds",
                                 "0,1", "--set", "n_hospitals=25", "--set", "n_patients=3000", "--set", "n_features=30",
                                 "--set", "hidden=16,8"}});
    runs.push_back({"clinical_csv", {"--dataset", "clinical_csv", "--algo", "fishr_intra_geo", "--rounds", "3", "--seeds",
                                     "0,1", "--set", "clinical_csv=" + (root / "clinical.csv").string(), "--set",
                                     "hidden=8", "--set", "batch_size=16"}});
    runs.push_back({"rotated", {"--dataset", "rotated", "--algo", "fishr_intra_arith", "--rounds", "3", "--seeds", "0,1",
                                "--set", "rotated_source=synth", "--set", "n_synth_images=300", "--set", "hidden=16"}});
    runs.push_back({"sweep", {"--dataset", "synth_spurious", "--algo", "fed_curv", "--rounds", "3", "--seeds", "0,1",
                              "--set", "n_per_silo=100", "--sweep-lambdas", "0,0.5,2"}});
    if (have_mnist) {
        runs.push_back({"color_digits", {"--dataset", "color_digits", "--algo", "geometric", "--rounds", "2", "--seeds",
                                         "0,1", "--set", "mnist_limit=600"}});
    }

    std::string detail;
    bool ok = true;
    for (auto& [name, args] : runs) {
        std::vector<fs::path> outs{root / (name + "_a"), root / (name + "_b"), root / (name + "_jobs")};
        for (std::size_t r = 0; r < outs.size(); ++r) {
            auto a = args;
            a.insert(a.end(), {"--out", outs[r].string()});
            if (r == 2) a.insert(a.end(), {"--jobs", "3"});
            if (cli(a) != 0) return {false, name + ": run failed"};
        }
        const auto first = tree(outs[0]);
        const bool same = !first.empty() && first == tree(outs[1]) && first == tree(outs[2]);
        ok = ok && same;
        if (!same) detail += " " + name + " differs;";
    }
    return {ok, fmt("%zu experiments run three times (sequential, repeated, 3 jobs)", runs.size()) +
                    (ok ? std::string(", outputs bit-identical") : detail) + (have_mnist ? "" : "; MNIST run skipped")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    int only = 0;
    std::string exe = FEDILC_CLI_PATH;
    app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
    app.add_option("--cli", exe, "path to the fedilc executable");
    CLI11_PARSE(app, argc, argv);

    const fs::path mnist = [] {
        const char* env = std::getenv("FEDILC_DATA_DIR");
        return fs::path(env && *env ? env : "data") / "mnist" / "train-images-idx3-ubyte";
    }();
    const bool have_mnist = fs::exists(mnist);

    const std::vector<std::function<Outcome()>> criteria{
        criterion1, criterion2, criterion3, criterion4, criterion5, criterion6, criterion7, criterion8,
        [&] { return criterion9(exe); }, [&] { return criterion10(have_mnist); }};

    bool all = true;
    for (int i = 1; i <= 10; ++i) {
        if (only != 0 && i != only) continue;
        Outcome o;
        try {
            o = criteria[static_cast<std::size_t>(i - 1)]();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << "criterion " << i << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
