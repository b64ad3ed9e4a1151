#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fedilc/datasets.hpp"
#include "fedilc/federation.hpp"
#include "fedilc/random.hpp"

using namespace fedilc;

namespace {

FederationDataset small_fed(std::size_t silos = 3, std::size_t n = 60) {
    std::vector<double> flips;
    for (std::size_t e = 0; e < silos; ++e) flips.push_back(0.1 + 0.2 * static_cast<double>(e));
    return make_synth_spurious(n, 4, flips, 0.9, 17);
}

RoundConfig cfg(AlgoMode mode, double lambda = 1.0) {
    RoundConfig c;
    c.mode = mode;
    c.lambda = lambda;
    c.rounds = 4;
    c.batch_size = 16;
    c.geo_chunk = 4;
    c.seed = 9;
    c.adam.lr = 0.01;
    c.adam.weight_decay = 0.01;
    return c;
}

const ModelSpec kSpec{{5, 6, 1}};

ClientUpdate fake_update(std::size_t id, std::vector<double> grad, std::size_t head) {
    ClientUpdate u;
    u.client_id = id;
    u.grad = std::move(grad);
    u.var_diag.values.assign(head, 0.01 * static_cast<double>(id + 1));
    u.var_diag.sample_count = 4;
    u.n = 4;
    return u;
}

}  // namespace

TEST_CASE("mode names round trip") {
    for (AlgoMode m : all_algo_modes()) CHECK(parse_algo_mode(to_string(m)) == m);
    CHECK(all_algo_modes().size() == 6);
    CHECK_THROWS(parse_algo_mode("fedavg"));
    CHECK_FALSE(uses_penalty(AlgoMode::geometric));
    CHECK(uses_penalty(AlgoMode::fed_curv));
    CHECK(geo_across_clients(AlgoMode::fishr_inter_geo));
    CHECK(intra_silo(AlgoMode::fishr_intra_arith));
}

TEST_CASE("round mini-batches") {
    const RoundConfig c = cfg(AlgoMode::fed_sgd);
    const auto all = round_batch_indices(10, 0, 0, c);
    CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    const auto a = round_batch_indices(100, 2, 5, c);
    CHECK(a.size() == 16);
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 16);
    CHECK(*std::max_element(a.begin(), a.end()) < 100);
    CHECK(a == round_batch_indices(100, 2, 5, c));
    CHECK(a != round_batch_indices(100, 2, 6, c));
    CHECK(a != round_batch_indices(100, 3, 5, c));
}

TEST_CASE("one silo with a full batch is centralized Adam") {
    const auto fed = small_fed(1, 40);
    RoundConfig c = cfg(AlgoMode::fed_sgd);
    c.batch_size = 1000;
    const ModelSpec spec{{5, 6, 1}};
    ServerState s = init_server(spec, c);
    ParamVector w = s.w;
    AdamState adam = c.adam.fresh(w.size());
    const Batch b = fed.silos[0].train.as_batch();
    for (int r = 0; r < 3; ++r) {
        server_round(s, {client_update(spec, fed.silos[0].train, 0, s.round, s.w, s.v_bar_prev.values, c)}, c);
        const ParamVector g = backward_full(spec, w, b);
        adam_step(adam, w.values(), g.values());
        CHECK(s.w == w);
    }
}

TEST_CASE("server result ignores upload order") {
    const std::size_t dim = ParamVector(kSpec).size();
    Rng rng(3);
    std::vector<ClientUpdate> ups;
    for (std::size_t id = 0; id < 4; ++id) {
        std::vector<double> g(dim);
        for (double& x : g) x = rng.uniform(-1, 1);
        ups.push_back(fake_update(id, g, kSpec.head_size()));
    }
    for (AlgoMode m : all_algo_modes()) {
        const RoundConfig c = cfg(m);
        ServerState a = init_server(kSpec, c);
        ServerState b = a;
        auto shuffled = ups;
        std::reverse(shuffled.begin(), shuffled.end());
        std::swap(shuffled[0], shuffled[2]);
        server_round(a, ups, c);
        server_round(b, shuffled, c);
        CHECK(a.w == b.w);
        CHECK(a.v_bar_prev == b.v_bar_prev);
    }
}

TEST_CASE("server stores the mean client variance for the next round") {
    const std::size_t dim = ParamVector(kSpec).size();
    std::vector<ClientUpdate> ups{fake_update(0, std::vector<double>(dim, 0.1), kSpec.head_size()),
                                  fake_update(1, std::vector<double>(dim, 0.2), kSpec.head_size())};
    const RoundConfig c = cfg(AlgoMode::fishr_inter_geo);
    ServerState s = init_server(kSpec, c);
    server_round(s, ups, c);
    CHECK(s.round == 1);
    CHECK(s.v_bar_prev.sample_count == 2);
    for (double v : s.v_bar_prev.values) CHECK(v == doctest::Approx(0.015));
}

TEST_CASE("identical clients aggregate to their shared gradient") {
    const std::size_t dim = ParamVector(kSpec).size();
    Rng rng(4);
    std::vector<double> g(dim);
    for (double& x : g) x = rng.uniform(-2, 2);
    std::vector<ClientUpdate> ups;
    for (std::size_t id = 0; id < 5; ++id) ups.push_back(fake_update(id, g, kSpec.head_size()));
    for (AlgoMode m : all_algo_modes()) {
        const auto combined = combine_client_grads(m, ups);
        for (std::size_t k = 0; k < dim; ++k) CHECK(combined[k] == doctest::Approx(g[k]).epsilon(1e-13));
    }
}

TEST_CASE("opposing geometric gradients cancel and leave only weight decay") {
    const std::size_t dim = ParamVector(kSpec).size();
    Rng rng(5);
    std::vector<double> g(dim);
    for (double& x : g) x = rng.uniform(-2, 2);
    std::vector<double> neg(g);
    for (double& x : neg) x = -x;
    const RoundConfig c = cfg(AlgoMode::geometric);
    ServerState s = init_server(kSpec, c);
    const ParamVector before = s.w;
    server_round(s, {fake_update(0, g, kSpec.head_size()), fake_update(1, neg, kSpec.head_size())}, c);
    const double decay = 1.0 - c.adam.lr * c.adam.weight_decay;
    for (std::size_t k = 0; k < dim; ++k) CHECK(s.w.values()[k] == before.values()[k] * decay);
}

TEST_CASE("zero lambda makes the penalized modes match their plain counterparts") {
    const auto fed = small_fed();
    const ModelSpec spec{{5, 6, 1}};
    const RoundLog geo = run_experiment(fed, cfg(AlgoMode::geometric), spec);
    const RoundLog inter = run_experiment(fed, cfg(AlgoMode::fishr_inter_geo, 0.0), spec);
    CHECK(geo.final_params == inter.final_params);
    CHECK(geo.rounds == inter.rounds);
}

TEST_CASE("arithmetic chunking matches the plain batch gradient") {
    const auto fed = small_fed();
    const ModelSpec spec{{5, 6, 1}};
    RoundConfig c = cfg(AlgoMode::fishr_intra_arith);
    const ParamVector w = init_params(spec, 1);
    const std::vector<double> vbar(spec.head_size(), 0.0);
    const auto intra = client_update(spec, fed.silos[1].train, 1, 2, w, vbar, c);
    c.mode = AlgoMode::fed_curv;
    const auto inter = client_update(spec, fed.silos[1].train, 1, 2, w, vbar, c);
    REQUIRE(intra.grad.size() == inter.grad.size());
    for (std::size_t k = 0; k < intra.grad.size(); ++k) CHECK(intra.grad[k] == doctest::Approx(inter.grad[k]).epsilon(1e-12));
    CHECK(intra.var_diag.values.size() == spec.head_size());
    CHECK(intra.n == 16);
}

TEST_CASE("penalty gradient only touches the head block") {
    const auto fed = small_fed();
    const ModelSpec spec{{5, 6, 1}};
    const ParamVector w = init_params(spec, 2);
    const std::vector<double> vbar(spec.head_size(), 0.5);
    const auto plain = client_update(spec, fed.silos[0].train, 0, 0, w, vbar, cfg(AlgoMode::fishr_inter_geo, 0.0));
    const auto pen = client_update(spec, fed.silos[0].train, 0, 0, w, vbar, cfg(AlgoMode::fishr_inter_geo, 3.0));
    const std::size_t head = w.head_offset();
    for (std::size_t k = 0; k < head; ++k) CHECK(plain.grad[k] == pen.grad[k]);
    bool moved = false;
    for (std::size_t k = head; k < w.size(); ++k) moved = moved || plain.grad[k] != pen.grad[k];
    CHECK(moved);
}

TEST_CASE("server rejects malformed rounds") {
    const std::size_t dim = ParamVector(kSpec).size();
    const RoundConfig c = cfg(AlgoMode::fed_curv);
    ServerState s = init_server(kSpec, c);
    const auto good = fake_update(0, std::vector<double>(dim, 0.1), kSpec.head_size());
    CHECK_THROWS(server_round(s, {}, c));
    CHECK_THROWS(server_round(s, {good, good}, c));
    auto short_grad = fake_update(1, std::vector<double>(dim - 1, 0.1), kSpec.head_size());
    CHECK_THROWS(server_round(s, {good, short_grad}, c));
    auto nan = fake_update(1, std::vector<double>(dim, NAN), kSpec.head_size());
    CHECK_THROWS(server_round(s, {good, nan}, c));
    auto negvar = fake_update(1, std::vector<double>(dim, 0.1), kSpec.head_size());
    negvar.var_diag.values[0] = -1.0;
    CHECK_THROWS(server_round(s, {good, negvar}, c));
    auto empty = fake_update(1, std::vector<double>(dim, 0.1), kSpec.head_size());
    empty.n = 0;
    CHECK_THROWS(server_round(s, {good, empty}, c));
    CHECK(s.round == 0);
}

TEST_CASE("experiments are deterministic and pick the first best round") {
    const auto fed = small_fed();
    const ModelSpec spec{{5, 6, 1}};
    for (AlgoMode m : all_algo_modes()) {
        const RoundConfig c = cfg(m);
        const RoundLog a = run_experiment(fed, c, spec);
        const RoundLog b = run_experiment(fed, c, spec);
        CHECK(a.rounds == b.rounds);
        CHECK(a.final_params == b.final_params);
        REQUIRE(a.rounds.size() == 4);
        for (const auto& r : a.rounds) CHECK(a.best_round().ood.loss <= r.ood.loss);
        for (std::size_t i = 0; i < a.best; ++i) CHECK(a.rounds[i].ood.loss > a.best_round().ood.loss);
        CHECK(a.rounds.front().per_silo_accuracy.size() == 3);
        CHECK(std::isfinite(a.best_round().ood.auroc));
    }
}
