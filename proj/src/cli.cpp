#include "fedilc/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "fedilc/wire.hpp"

namespace fedilc {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct KindName {
    DatasetKind kind;
    std::string_view name;
};

constexpr KindName kKindNames[] = {
    {DatasetKind::color_digits, "color_digits"},     {DatasetKind::rotated, "rotated"},
    {DatasetKind::synth_spurious, "synth_spurious"}, {DatasetKind::synth_clinical, "synth_clinical"},
    {DatasetKind::clinical_csv, "clinical_csv"},
};

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

double to_double(std::string_view key, std::string_view v) {
    v = trim(v);
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError(std::string(key) + ": expected a number, got '" + std::string(v) + "'");
    }
    return out;
}

std::uint64_t to_uint(std::string_view key, std::string_view v) {
    v = trim(v);
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_uint(key, v)); }

std::vector<double> to_doubles(std::string_view key, std::string_view v) {
    std::vector<double> out;
    for (auto part : split(v, ',')) out.push_back(to_double(key, part));
    return out;
}

std::filesystem::path data_dir() {
    const char* env = std::getenv("FEDILC_DATA_DIR");
    return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("data");
}

std::string format17(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string_view to_string(DatasetKind kind) noexcept {
    for (const auto& k : kKindNames) {
        if (k.kind == kind) return k.name;
    }
    return "?";
}

DatasetKind parse_dataset_kind(std::string_view text) {
    for (const auto& k : kKindNames) {
        if (k.name == text) return k.kind;
    }
    throw ConfigError("unknown dataset '" + std::string(text) + "'");
}

void ExperimentConfig::set(std::string_view key, std::string_view value) {
    key = trim(key);
    value = trim(value);
    const std::string k(key);
    if (key == "dataset") {
        dataset = parse_dataset_kind(value);
    } else if (key == "algo" || key == "mode") {
        try {
            mode = parse_algo_mode(value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    } else if (key == "rounds") {
        rounds = to_size(key, value);
    } else if (key == "batch_size") {
        batch_size = to_size(key, value);
    } else if (key == "geo_chunk") {
        geo_chunk = to_size(key, value);
    } else if (key == "optimizer") {
        if (value == "adam") {
            optimizer = Optimizer::adam;
        } else if (value == "sgd") {
            optimizer = Optimizer::sgd;
        } else {
            throw ConfigError("optimizer must be adam or sgd");
        }
    } else if (key == "lr") {
        lr = to_double(key, value);
    } else if (key == "weight_decay") {
        weight_decay = to_double(key, value);
    } else if (key == "lambda") {
        lambda = to_double(key, value);
    } else if (key == "hidden") {
        std::vector<std::size_t> h;
        if (!value.empty()) {
            for (auto part : split(value, ',')) h.push_back(to_size(key, part));
        }
        hidden = h;
    } else if (key == "seeds") {
        seeds.clear();
        for (auto part : split(value, ',')) seeds.push_back(to_uint(key, part));
    } else if (key == "data_seed") {
        data_seed = to_uint(key, value);
    } else if (key == "out") {
        output_dir = std::string(value);
    } else if (key == "jobs") {
        jobs = to_size(key, value);
    } else if (key == "n_per_silo") {
        n_per_silo = to_size(key, value);
    } else if (key == "d_inv") {
        d_inv = to_size(key, value);
    } else if (key == "flip_probs") {
        flip_probs = to_doubles(key, value);
    } else if (key == "ood_flip") {
        ood_flip = to_double(key, value);
    } else if (key == "ood_label_flip") {
        ood_label_flip = to_double(key, value);
    } else if (key == "mnist_images") {
        mnist_images = std::string(value);
    } else if (key == "mnist_labels") {
        mnist_labels = std::string(value);
    } else if (key == "mnist_limit") {
        mnist_limit = to_size(key, value);
    } else if (key == "rotated_source") {
        if (value != "cifar" && value != "synth") throw ConfigError("rotated_source must be cifar or synth");
        rotated_source = std::string(value);
    } else if (key == "cifar_files") {
        cifar_files.clear();
        for (auto part : split(value, ',')) cifar_files.emplace_back(std::string(part));
    } else if (key == "cifar_limit") {
        cifar_limit = to_size(key, value);
    } else if (key == "n_synth_images") {
        n_synth_images = to_size(key, value);
    } else if (key == "silo_degrees") {
        // Silos separated by ';', angles by ','.
        silo_degrees.clear();
        for (auto silo : split(value, ';')) silo_degrees.push_back(to_doubles(key, silo));
    } else if (key == "ood_degrees") {
        const auto v = to_doubles(key, value);
        if (v.size() != 2) throw ConfigError("ood_degrees needs two values: lo,hi");
        ood_degrees = {v[0], v[1]};
    } else if (key == "n_hospitals") {
        n_hospitals = to_size(key, value);
    } else if (key == "n_features") {
        n_features = to_size(key, value);
    } else if (key == "n_patients") {
        n_patients = to_size(key, value);
    } else if (key == "positive_rate") {
        positive_rate = to_double(key, value);
    } else if (key == "clinical_csv") {
        clinical_csv = std::string(value);
    } else {
        throw ConfigError("unknown config key '" + k + "'");
    }
}

void ExperimentConfig::finalize() {
    // Per-dataset defaults for the optimizer, penalty and hidden layers.
    struct Defaults {
        double lr;
        double wd;
        double lambda;
        std::vector<std::size_t> hidden;
    };
    Defaults d{1e-3, 0.0, 0.0, {}};
    switch (dataset) {
        case DatasetKind::color_digits: d = {3e-4, 0.01, 15.0, {390, 390}}; break;
        case DatasetKind::rotated: d = {1e-4, 1e-3, 1.0, {256, 128}}; break;
        case DatasetKind::synth_spurious: d = {1e-2, 0.0, 1.0, {32}}; break;
        case DatasetKind::synth_clinical:
        case DatasetKind::clinical_csv: d = {2e-4, 1e-3, 0.1, {1024, 1024, 512}}; break;
    }
    if (!lr) lr = d.lr;
    if (!weight_decay) weight_decay = d.wd;
    if (!lambda) lambda = d.lambda;
    if (!hidden) hidden = d.hidden;
    if (!ood_flip) ood_flip = 0.90;

    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds must be distinct");
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (geo_chunk < 1) throw ConfigError("geo_chunk must be >= 1");
    if (geo_chunk > batch_size) throw ConfigError("geo_chunk must not exceed batch_size");
    if (!(*lr > 0.0)) throw ConfigError("lr must be > 0");
    if (*weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (*lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    for (std::size_t h : *hidden) {
        if (h == 0) throw ConfigError("hidden layer sizes must be >= 1");
    }
    for (double p : flip_probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("flip_probs must lie in [0,1]");
    }
    if (flip_probs.empty()) throw ConfigError("flip_probs must not be empty");
    if (!(*ood_flip >= 0.0 && *ood_flip <= 1.0) || !(ood_label_flip >= 0.0 && ood_label_flip <= 1.0)) {
        throw ConfigError("OOD flip probabilities must lie in [0,1]");
    }

    switch (dataset) {
        case DatasetKind::color_digits:
            if (mnist_images.empty()) mnist_images = data_dir() / "mnist" / "train-images-idx3-ubyte";
            if (mnist_labels.empty()) mnist_labels = data_dir() / "mnist" / "train-labels-idx1-ubyte";
            if (!std::filesystem::exists(mnist_images) || !std::filesystem::exists(mnist_labels)) {
                throw ConfigError("MNIST IDX files not found (" + mnist_images.string() + ", " + mnist_labels.string() +
                                  "); set mnist_images/mnist_labels or FEDILC_DATA_DIR");
            }
            break;
        case DatasetKind::rotated:
            if (silo_degrees.empty()) throw ConfigError("silo_degrees must list at least one silo");
            for (const auto& s : silo_degrees) {
                if (s.empty()) throw ConfigError("every silo needs at least one angle");
                for (double a : s) {
                    if (a < -180.0 || a > 180.0) throw ConfigError("angles must lie in [-180, 180]");
                }
            }
            if (ood_degrees.first > ood_degrees.second) throw ConfigError("ood_degrees must be lo,hi with lo <= hi");
            if (rotated_source == "cifar") {
                if (cifar_files.empty()) {
                    for (int b = 1; b <= 5; ++b) {
                        cifar_files.push_back(data_dir() / "cifar-10-batches-bin" / ("data_batch_" + std::to_string(b) + ".bin"));
                    }
                }
                for (const auto& f : cifar_files) {
                    if (!std::filesystem::exists(f)) {
                        throw ConfigError("CIFAR file not found: " + f.string() + " (set cifar_files, FEDILC_DATA_DIR or rotated_source = synth)");
                    }
                }
            }
            break;
        case DatasetKind::synth_spurious:
            if (d_inv < 1) throw ConfigError("d_inv must be >= 1");
            if (n_per_silo < 2) throw ConfigError("n_per_silo must be >= 2");
            break;
        case DatasetKind::synth_clinical:
            if (n_hospitals <= 20) throw ConfigError("n_hospitals must be >= 21");
            if (n_features < 1) throw ConfigError("n_features must be >= 1");
            if (n_patients < n_hospitals) throw ConfigError("n_patients must be >= n_hospitals");
            if (!(positive_rate > 0.0 && positive_rate < 1.0)) throw ConfigError("positive_rate must lie in (0,1)");
            break;
        case DatasetKind::clinical_csv:
            if (clinical_csv.empty() || !std::filesystem::exists(clinical_csv)) {
                throw ConfigError("clinical_csv file not found: '" + clinical_csv.string() + "'");
            }
            break;
    }
}

ExperimentConfig parse_config_text(std::string_view text) {
    ExperimentConfig cfg;
    std::size_t line_no = 0;
    for (auto line : split(text, '\n')) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        cfg.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

FederationDataset build_dataset(const ExperimentConfig& c) {
    switch (c.dataset) {
        case DatasetKind::synth_spurious:
            return make_synth_spurious(c.n_per_silo, c.d_inv, c.flip_probs, *c.ood_flip, c.data_seed);
        case DatasetKind::color_digits: {
            LabeledDataset base = load_mnist(c.mnist_images, c.mnist_labels);
            if (c.mnist_limit > 0 && c.mnist_limit < base.size()) {
                std::vector<std::size_t> keep(c.mnist_limit);
                for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
                base = base.subset(keep);
            }
            return make_color_digits(base, c.flip_probs, *c.ood_flip, c.ood_label_flip, c.data_seed);
        }
        case DatasetKind::rotated: {
            LabeledDataset base;
            if (c.rotated_source == "synth") {
                base = make_synth_images(c.n_synth_images, {32, 32, 3}, 10, c.data_seed);
            } else {
                base = load_cifar(c.cifar_files);
                if (c.cifar_limit > 0 && c.cifar_limit < base.size()) {
                    std::vector<std::size_t> keep(c.cifar_limit);
                    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
                    base = base.subset(keep);
                }
            }
            return make_rotated_silos(base, {32, 32, 3}, c.silo_degrees, c.ood_degrees, c.data_seed);
        }
        case DatasetKind::synth_clinical: {
            ClinicalOptions opt;
            opt.n_patients = c.n_patients;
            return make_synth_clinical(c.n_hospitals, c.n_features, c.positive_rate, c.data_seed, opt).data;
        }
        case DatasetKind::clinical_csv:
            return load_clinical_csv(c.clinical_csv).data;
    }
    throw ConfigError("unsupported dataset");
}

ModelSpec model_for(const ExperimentConfig& config, const FederationDataset& data) {
    ModelSpec spec;
    spec.layer_sizes.push_back(data.feature_dim());
    for (std::size_t h : config.hidden.value_or(std::vector<std::size_t>{})) spec.layer_sizes.push_back(h);
    if (config.dataset == DatasetKind::rotated) {
        spec.layer_sizes.push_back(10);
        spec.head = Head::softmax_ce;
    } else {
        spec.layer_sizes.push_back(1);
        spec.head = Head::sigmoid_bce;
    }
    return spec;
}

RoundConfig round_config(const ExperimentConfig& config, std::uint64_t seed) {
    RoundConfig rc;
    rc.mode = config.mode;
    rc.lambda = config.effective_lambda();
    rc.rounds = config.rounds;
    rc.batch_size = config.batch_size;
    rc.geo_chunk = config.geo_chunk;
    rc.seed = seed;
    rc.optimizer = config.optimizer;
    rc.adam.lr = config.effective_lr();
    rc.adam.weight_decay = config.weight_decay.value_or(0.0);
    return rc;
}

std::vector<RoundLog> run_seeds(const ExperimentConfig& config, const FederationDataset& data, const ModelSpec& spec) {
    std::vector<RoundLog> logs(config.seeds.size());
    std::vector<std::exception_ptr> errors(config.seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < logs.size(); i = next++) {
            try {
                logs[i] = run_experiment(data, round_config(config, config.seeds[i]), spec);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(config.jobs, logs.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return logs;
}

std::string round_csv(const RoundLog& log) {
    std::string out = "round,train_loss,val_loss,ood_loss,ood_acc,ood_auroc,ood_auprc\n";
    for (const auto& r : log.rounds) {
        out += std::to_string(r.round);
        for (double v : {r.train_loss, r.val_loss, r.ood.loss, r.ood.accuracy, r.ood.auroc, r.ood.auprc}) {
            out += ',';
            out += format17(v);
        }
        out += '\n';
    }
    return out;
}

namespace {

json summarize(const std::vector<double>& values) {
    json j;
    j["values"] = values;
    if (values.size() >= 2) {
        const SeedSummary s = seed_summary(values);
        j["mean"] = s.mean;
        j["std"] = s.std;
    } else {
        j["mean"] = values.front();
        j["std"] = kNaN;
    }
    return j;
}

void dump17(const json& j, std::string& out, int indent, int depth) {
    const std::string pad = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * (depth + 1)), ' ') : "";
    const std::string close = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * depth), ' ') : "";
    const char* colon = indent > 0 ? ": " : ":";
    switch (j.type()) {
        case json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += '{';
            bool first = true;
            for (const auto& [k, v] : j.items()) {
                if (!first) out += ',';
                first = false;
                out += pad;
                out += json(k).dump();
                out += colon;
                dump17(v, out, indent, depth + 1);
            }
            out += close;
            out += '}';
            return;
        }
        case json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            out += '[';
            bool first = true;
            for (const auto& v : j) {
                if (!first) out += ',';
                first = false;
                out += pad;
                dump17(v, out, indent, depth + 1);
            }
            out += close;
            out += ']';
            return;
        }
        case json::value_t::number_float: {
            const double v = j.get<double>();
            out += std::isfinite(v) ? format17(v) : "null";
            return;
        }
        default:
            out += j.dump();
    }
}

}  // namespace

std::string dump_json17(const json& j, int indent) {
    std::string out;
    dump17(j, out, indent, 0);
    out += '\n';
    return out;
}

json summary_json(const ExperimentConfig& config, const std::vector<RoundLog>& logs) {
    std::vector<double> loss, acc, roc, pr, best, fvar, fkl, fent;
    json per_seed = json::array();
    for (std::size_t i = 0; i < logs.size(); ++i) {
        const RoundRecord& b = logs[i].best_round();
        loss.push_back(b.ood.loss);
        acc.push_back(b.ood.accuracy);
        roc.push_back(b.ood.auroc);
        pr.push_back(b.ood.auprc);
        fvar.push_back(logs[i].fairness.variance);
        fkl.push_back(logs[i].fairness.kl);
        fent.push_back(logs[i].fairness.entropy);
        json group_acc = b.per_subenv_accuracy.empty() ? json(b.per_silo_accuracy) : json(b.per_subenv_accuracy);
        per_seed.push_back(json{{"seed", config.seeds[i]},
                                {"best_round", b.round},
                                {"ood_loss", b.ood.loss},
                                {"ood_acc", b.ood.accuracy},
                                {"ood_auroc", b.ood.auroc},
                                {"ood_auprc", b.ood.auprc},
                                {"group_accuracy", group_acc}});
    }
    json j;
    j["dataset"] = to_string(config.dataset);
    j["algo"] = to_string(config.mode);
    j["lambda"] = config.effective_lambda();
    j["lr"] = config.effective_lr();
    j["weight_decay"] = config.weight_decay.value_or(0.0);
    j["rounds"] = config.rounds;
    j["batch_size"] = config.batch_size;
    j["geo_chunk"] = config.geo_chunk;
    j["seeds"] = config.seeds;
    j["selection"] = "min_ood_loss";
    j["ood_loss"] = summarize(loss);
    j["ood_acc"] = summarize(acc);
    j["ood_auroc"] = summarize(roc);
    j["ood_auprc"] = summarize(pr);
    j["fairness"] = json{{"variance", summarize(fvar)}, {"kl", summarize(fkl)}, {"entropy", summarize(fent)}};
    j["per_seed"] = per_seed;
    return j;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void write_run_outputs(const ExperimentConfig& config, const std::vector<RoundLog>& logs) {
    std::filesystem::create_directories(config.output_dir);
    for (std::size_t i = 0; i < logs.size(); ++i) {
        write_text(config.output_dir / ("rounds_seed" + std::to_string(config.seeds[i]) + ".csv"), round_csv(logs[i]));
    }
    write_text(config.output_dir / "summary.json", dump_json17(summary_json(config, logs)));
}

std::vector<SweepRow> sweep_lambda(const ExperimentConfig& config, const std::vector<double>& lambdas) {
    if (lambdas.empty()) throw ConfigError("lambda sweep needs at least one value");
    if (std::set<double>(lambdas.begin(), lambdas.end()).size() != lambdas.size()) {
        throw ConfigError("lambda sweep values must be distinct");
    }
    for (double l : lambdas) {
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda values must be finite and >= 0");
    }
    const FederationDataset data = build_dataset(config);
    const ModelSpec spec = model_for(config, data);
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        ExperimentConfig c = config;
        c.lambda = lambdas[i];
        c.output_dir = config.output_dir / ("lambda_" + std::to_string(i));
        const auto logs = run_seeds(c, data, spec);
        write_run_outputs(c, logs);
        std::vector<double> best;
        for (const auto& log : logs) best.push_back(log.best_round().ood.loss);
        rows.push_back({lambdas[i], best.size() >= 2 ? seed_summary(best) : SeedSummary{best.front(), kNaN}});
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "lambda,min_ood_loss_mean,min_ood_loss_std\n";
    for (const auto& r : rows) out += format17(r.lambda) + "," + format17(r.min_ood_loss.mean) + "," + format17(r.min_ood_loss.std) + "\n";
    return out;
}

namespace {

int run_command(const ExperimentConfig& config) {
    const FederationDataset data = build_dataset(config);
    const ModelSpec spec = model_for(config, data);
    const auto logs = run_seeds(config, data, spec);
    write_run_outputs(config, logs);
    const json s = summary_json(config, logs);
    std::cout << to_string(config.mode) << " on " << to_string(config.dataset) << ": min OOD loss "
              << format17(s["ood_loss"]["mean"].get<double>()) << " over " << logs.size() << " seed(s); wrote "
              << config.output_dir.string() << "\n";
    return 0;
}

int serve_command(const ExperimentConfig& config, const std::string& host, int port, std::size_t clients) {
    const FederationDataset data = build_dataset(config);
    const ModelSpec spec = model_for(config, data);
    const std::size_t n = data.silos.size();
    if (clients != 0 && clients != n) throw ConfigError("--clients must equal the number of silos (" + std::to_string(n) + ")");

    const auto silo_dir = config.output_dir / "silos";
    std::filesystem::create_directories(silo_dir);
    for (std::size_t k = 0; k < n; ++k) write_dataset_csv(silo_dir / ("silo_" + std::to_string(k) + ".csv"), data.silos[k].train);

    WireServer server(spec, n, config.batch_size, config.geo_chunk);
    const int bound = server.start(host, port);
    std::cout << "listening on " << host << ":" << bound << " for " << n << " clients; silo files in " << silo_dir.string()
              << std::endl;

    std::vector<RoundLog> logs;
    for (std::uint64_t seed : config.seeds) {
        const RoundConfig rc = round_config(config, seed);
        logs.push_back(run_experiment(data, rc, spec, server.begin_run(rc)));
    }
    write_run_outputs(config, logs);
    server.finish();
    server.wait_clients_done(10.0);
    server.stop();
    std::cout << "served " << logs.size() << " run(s); wrote " << config.output_dir.string() << std::endl;
    return 0;
}

int client_command(const std::string& address, const std::filesystem::path& silo, std::optional<std::size_t> id) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--connect expects host:port");
    std::string host = address.substr(0, colon);
    if (host.starts_with("http://")) host = host.substr(7);
    int port = 0;
    try {
        port = std::stoi(address.substr(colon + 1));
    } catch (const std::exception&) {
        throw ConfigError("--connect expects host:port");
    }
    if (!std::filesystem::exists(silo)) throw ConfigError("silo file not found: " + silo.string());
    const LabeledDataset data = read_dataset_csv(silo);
    ClientOptions opt;
    opt.client_id = id;
    const std::size_t uploads = run_client(host, port, data, opt);
    std::cout << "client done after " << uploads << " updates" << std::endl;
    return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"Federated training with geometric-mean aggregation and gradient-variance penalties"};
    std::string config_path;
    std::optional<std::string> dataset, algo, seeds, out, lambda_text, sweep;
    std::optional<std::size_t> rounds, jobs;
    std::vector<std::string> sets;
    bool serve = false;
    std::string connect;
    std::string silo;
    std::optional<std::size_t> client_id;
    std::string host = "127.0.0.1";
    int port = 8765;
    std::size_t clients = 0;

    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--dataset", dataset, "color_digits | rotated | synth_spurious | synth_clinical | clinical_csv");
    app.add_option("--algo", algo, "fed_sgd | geometric | fed_curv | fishr_inter_geo | fishr_intra_arith | fishr_intra_geo");
    app.add_option("--rounds", rounds, "number of rounds");
    app.add_option("--lambda", lambda_text, "penalty coefficient");
    app.add_option("--seeds", seeds, "comma-separated seeds");
    app.add_option("--out", out, "output directory");
    app.add_option("--jobs", jobs, "seeds run in parallel");
    app.add_option("--set", sets, "extra key=value overrides (repeatable)");
    app.add_option("--sweep-lambdas", sweep, "comma-separated lambda values to sweep");
    app.add_flag("--serve", serve, "serve rounds over HTTP to client processes");
    app.add_option("--host", host, "bind address for --serve");
    app.add_option("--port", port, "port for --serve (0 picks a free port)");
    app.add_option("--clients", clients, "expected clients for --serve (default: one per silo)");
    app.add_option("--connect", connect, "run as a client of host:port");
    app.add_option("--silo", silo, "silo CSV written by the server (client mode)");
    app.add_option("--client-id", client_id, "client id to request (client mode)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (!connect.empty()) {
            if (silo.empty()) throw ConfigError("--connect needs --silo");
            return client_command(connect, silo, client_id);
        }
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config_file(config_path);
        if (dataset) cfg.set("dataset", *dataset);
        if (algo) cfg.set("algo", *algo);
        if (rounds) cfg.rounds = *rounds;
        if (lambda_text) cfg.set("lambda", *lambda_text);
        if (seeds) cfg.set("seeds", *seeds);
        if (out) cfg.output_dir = *out;
        if (jobs) cfg.jobs = *jobs;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            cfg.set(s.substr(0, eq), s.substr(eq + 1));
        }
        cfg.finalize();

        if (serve) return serve_command(cfg, host, port, clients);
        if (sweep) {
            const auto rows = sweep_lambda(cfg, to_doubles("--sweep-lambdas", *sweep));
            std::filesystem::create_directories(cfg.output_dir);
            write_text(cfg.output_dir / "lambda_sweep.csv", sweep_csv(rows));
            std::cout << sweep_csv(rows);
            return 0;
        }
        return run_command(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fedilc
