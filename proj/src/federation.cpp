#include "fedilc/federation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedilc/kernels.hpp"
#include "fedilc/random.hpp"

namespace fedilc {

namespace {

struct ModeName {
    AlgoMode mode;
    std::string_view name;
};

constexpr ModeName kModeNames[] = {
    {AlgoMode::fed_sgd, "fed_sgd"},
    {AlgoMode::geometric, "geometric"},
    {AlgoMode::fed_curv, "fed_curv"},
    {AlgoMode::fishr_inter_geo, "fishr_inter_geo"},
    {AlgoMode::fishr_intra_arith, "fishr_intra_arith"},
    {AlgoMode::fishr_intra_geo, "fishr_intra_geo"},
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::string_view to_string(AlgoMode mode) noexcept {
    for (const auto& m : kModeNames) {
        if (m.mode == mode) return m.name;
    }
    return "?";
}

AlgoMode parse_algo_mode(std::string_view text) {
    for (const auto& m : kModeNames) {
        if (m.name == text) return m.mode;
    }
    throw std::invalid_argument("unknown algorithm '" + std::string(text) + "'");
}

const std::vector<AlgoMode>& all_algo_modes() {
    static const std::vector<AlgoMode> modes = [] {
        std::vector<AlgoMode> out;
        for (const auto& m : kModeNames) out.push_back(m.mode);
        return out;
    }();
    return modes;
}

bool uses_penalty(AlgoMode mode) noexcept {
    return mode != AlgoMode::fed_sgd && mode != AlgoMode::geometric;
}

bool geo_across_clients(AlgoMode mode) noexcept {
    return mode == AlgoMode::geometric || mode == AlgoMode::fishr_inter_geo;
}

bool intra_silo(AlgoMode mode) noexcept {
    return mode == AlgoMode::fishr_intra_arith || mode == AlgoMode::fishr_intra_geo;
}

void RoundConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (geo_chunk < 1) throw std::invalid_argument("geo_chunk must be >= 1");
    if (!(adam.lr > 0.0) || !std::isfinite(adam.lr)) throw std::invalid_argument("lr must be finite and > 0");
    if (!(adam.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw std::invalid_argument("Adam betas must lie in [0,1)");
    }
    if (!(adam.eps > 0.0)) throw std::invalid_argument("Adam eps must be > 0");
}

ServerState init_server(const ModelSpec& spec, const RoundConfig& config) {
    spec.validate();
    ServerState s;
    s.w = init_params(spec, stream_seed(config.seed, 0x696e6974ULL));
    s.adam = config.adam.fresh(s.w.size());
    s.v_bar_prev.values.assign(spec.head_size(), 0.0);
    return s;
}

std::vector<std::size_t> round_batch_indices(std::size_t n, std::size_t client_id, std::int64_t round,
                                             const RoundConfig& config) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (config.batch_size >= n) return idx;
    Rng rng(stream_seed(config.seed, client_id, static_cast<std::uint64_t>(round)));
    // Partial Fisher-Yates: the first batch_size slots are a uniform draw.
    for (std::size_t i = 0; i < config.batch_size; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(config.batch_size);
    return idx;
}

namespace {

void check_client_inputs(const ModelSpec& spec, const LabeledDataset& data, const ParamVector& w,
                         std::span<const double> v_bar_prev) {
    if (data.empty()) throw std::invalid_argument("client update: empty silo");
    if (w.size() != ParamVector(spec).size()) throw std::invalid_argument("client update: parameter length mismatch");
    if (v_bar_prev.size() != spec.head_size()) throw std::invalid_argument("client update: v_bar_prev length mismatch");
}

Batch make_batch(const LabeledDataset& data, std::span<const std::size_t> rows) {
    Batch b;
    b.inputs = data.inputs.select_rows(rows);
    b.labels.reserve(rows.size());
    for (std::size_t r : rows) b.labels.push_back(data.labels[r]);
    return b;
}

// Adds lambda * penalty gradient to the head block and fills var_diag.
void finish_update(ClientUpdate& u, const ModelSpec& spec, const ParamVector& w, const Batch& batch,
                   std::span<const double> v_bar_prev, const RoundConfig& config) {
    const ForwardResult fwd = forward(spec, w, batch.inputs);
    if (uses_penalty(config.mode) && config.lambda > 0.0) {
        const auto pg = fishr_penalty_grad(spec, fwd, batch.labels, v_bar_prev);
        kernels::axpy(config.lambda, pg, std::span<double>(u.grad).subspan(w.head_offset(), pg.size()));
    }
    u.var_diag = grad_variance_diag(per_sample_head_grads(spec, fwd, batch.labels));
    u.n = batch.size();
}

}  // namespace

ClientUpdate client_update_inter(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                                 std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                                 const RoundConfig& config) {
    check_client_inputs(spec, data, w, v_bar_prev);
    const auto rows = round_batch_indices(data.size(), client_id, round, config);
    const Batch batch = make_batch(data, rows);
    ClientUpdate u;
    u.client_id = client_id;
    const ParamVector g = backward_full(spec, w, batch);
    u.grad.assign(g.values().begin(), g.values().end());
    finish_update(u, spec, w, batch, v_bar_prev, config);
    return u;
}

std::vector<double> combine_chunk_grads(AlgoMode mode, GradientSet chunks) {
    return mode == AlgoMode::fishr_intra_arith ? arith_mean(chunks) : weighted_geo_mean(chunks);
}

ClientUpdate client_update_intra(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                                 std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                                 const RoundConfig& config) {
    check_client_inputs(spec, data, w, v_bar_prev);
    const auto rows = round_batch_indices(data.size(), client_id, round, config);
    const Batch batch = make_batch(data, rows);

    std::vector<ParamVector> chunk_grads;
    for (std::size_t begin = 0; begin < rows.size(); begin += config.geo_chunk) {
        const std::size_t len = std::min(config.geo_chunk, rows.size() - begin);
        chunk_grads.push_back(backward_full(spec, w, make_batch(data, std::span(rows).subspan(begin, len))));
    }
    std::vector<std::span<const double>> views;
    for (const auto& g : chunk_grads) views.push_back(g.values());

    ClientUpdate u;
    u.client_id = client_id;
    u.grad = combine_chunk_grads(config.mode, views);
    finish_update(u, spec, w, batch, v_bar_prev, config);
    return u;
}

ClientUpdate client_update(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                           std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                           const RoundConfig& config) {
    return intra_silo(config.mode) ? client_update_intra(spec, data, client_id, round, w, v_bar_prev, config)
                                   : client_update_inter(spec, data, client_id, round, w, v_bar_prev, config);
}

std::vector<double> combine_client_grads(AlgoMode mode, std::span<const ClientUpdate> updates) {
    std::vector<std::span<const double>> views;
    for (const auto& u : updates) views.push_back(u.grad);
    return geo_across_clients(mode) ? weighted_geo_mean(views) : arith_mean(views);
}

void server_round(ServerState& state, std::vector<ClientUpdate> updates, const RoundConfig& config) {
    if (updates.empty()) throw std::invalid_argument("server_round: no client updates");
    std::sort(updates.begin(), updates.end(),
              [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
    const std::size_t head = state.v_bar_prev.values.size();
    for (std::size_t i = 0; i < updates.size(); ++i) {
        const auto& u = updates[i];
        if (i > 0 && updates[i - 1].client_id == u.client_id) {
            throw std::invalid_argument("server_round: duplicate client_id " + std::to_string(u.client_id));
        }
        if (u.grad.size() != state.w.size()) throw std::invalid_argument("server_round: gradient length mismatch");
        if (u.var_diag.values.size() != head) throw std::invalid_argument("server_round: var_diag length mismatch");
        if (u.n < 1) throw std::invalid_argument("server_round: sample count must be >= 1");
        for (double g : u.grad) {
            if (!std::isfinite(g)) throw std::invalid_argument("server_round: non-finite gradient");
        }
        for (double v : u.var_diag.values) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("server_round: invalid variance");
        }
    }

    const auto combined = combine_client_grads(config.mode, updates);
    if (config.optimizer == Optimizer::adam) {
        adam_step(state.adam, state.w.values(), combined);
    } else {
        sgd_step(config.adam.lr, config.adam.weight_decay, state.w.values(), combined);
    }

    std::vector<VarianceDiag> diags;
    diags.reserve(updates.size());
    for (auto& u : updates) diags.push_back(std::move(u.var_diag));
    state.v_bar_prev.values = mean_variance(diags);
    state.v_bar_prev.sample_count = diags.size();
    ++state.round;
}

namespace {

struct Tally {
    double loss_sum = 0.0;
    std::size_t count = 0;

    double mean() const { return count == 0 ? kNaN : loss_sum / static_cast<double>(count); }
};

double add_loss(Tally& t, const ModelSpec& spec, const ForwardResult& fwd, const LabeledDataset& d) {
    const double mean = compute_loss(fwd.logits, d.labels, spec.head);
    t.loss_sum += mean * static_cast<double>(d.size());
    t.count += d.size();
    return mean;
}

}  // namespace

RoundRecord evaluate(const ModelSpec& spec, const ParamVector& w, const FederationDataset& data) {
    RoundRecord rec;
    Tally train;
    Tally val;
    for (std::size_t s = 0; s < data.silos.size(); ++s) {
        const auto& silo = data.silos[s];
        add_loss(train, spec, forward(spec, w, silo.train.inputs), silo.train);
        // Accuracy is measured on validation data, falling back to train for silos without any.
        const LabeledDataset& held = silo.val.empty() ? silo.train : silo.val;
        const ForwardResult fwd = forward(spec, w, held.inputs);
        if (!silo.val.empty()) add_loss(val, spec, fwd, silo.val);
        const Predictions pred = predict(fwd.logits, spec.head);
        rec.per_silo_accuracy.push_back(accuracy(pred.labels, held.labels));
        if (!held.sub_env.empty()) {
            std::map<int, std::pair<std::size_t, std::size_t>> hits;  // env -> (correct, total)
            for (std::size_t i = 0; i < held.size(); ++i) {
                auto& h = hits[held.sub_env[i]];
                h.first += pred.labels[i] == held.labels[i] ? 1 : 0;
                h.second += 1;
            }
            for (const auto& [env, h] : hits) {
                rec.per_subenv_accuracy["silo" + std::to_string(s) + "/env" + std::to_string(env)] =
                    static_cast<double>(h.first) / static_cast<double>(h.second);
            }
        }
    }
    rec.train_loss = train.mean();
    rec.val_loss = val.mean();

    if (data.ood_test.empty()) {
        rec.ood.loss = rec.ood.accuracy = rec.ood.auroc = rec.ood.auprc = kNaN;
    } else {
        const ForwardResult fwd = forward(spec, w, data.ood_test.inputs);
        rec.ood.loss = compute_loss(fwd.logits, data.ood_test.labels, spec.head);
        const Predictions pred = predict(fwd.logits, spec.head);
        rec.ood.accuracy = accuracy(pred.labels, data.ood_test.labels);
        const auto& y = data.ood_test.labels;
        const bool both_classes = std::find(y.begin(), y.end(), 0) != y.end() && std::find(y.begin(), y.end(), 1) != y.end();
        if (spec.head == Head::sigmoid_bce && both_classes) {
            rec.ood.auroc = auroc(pred.scores, y);
            rec.ood.auprc = auprc(pred.scores, y);
        } else {
            rec.ood.auroc = rec.ood.auprc = kNaN;
        }
    }
    rec.ood.per_silo_accuracy = rec.per_silo_accuracy;
    rec.ood.per_subenv_accuracy = rec.per_subenv_accuracy;
    return rec;
}

UpdateSource in_process_clients(const ModelSpec& spec, const FederationDataset& data, const RoundConfig& config) {
    return [&spec, &data, config](const ServerState& state) {
        std::vector<ClientUpdate> out;
        out.reserve(data.silos.size());
        for (std::size_t c = 0; c < data.silos.size(); ++c) {
            out.push_back(client_update(spec, data.silos[c].train, c, state.round, state.w, state.v_bar_prev.values, config));
        }
        return out;
    };
}

RoundLog run_experiment(const FederationDataset& data, const RoundConfig& config, const ModelSpec& spec,
                        const UpdateSource& source) {
    config.validate();
    spec.validate();
    data.validate();
    if (data.feature_dim() != spec.input_size()) throw std::invalid_argument("run_experiment: model input size does not match data");
    const UpdateSource clients = source ? source : in_process_clients(spec, data, config);

    ServerState state = init_server(spec, config);
    RoundLog log;
    log.rounds.reserve(config.rounds);
    for (std::size_t r = 0; r < config.rounds; ++r) {
        server_round(state, clients(state), config);
        RoundRecord rec = evaluate(spec, state.w, data);
        rec.round = state.round;
        log.rounds.push_back(std::move(rec));
    }

    // Best round: lowest OOD loss; without an OOD set, lowest validation loss.
    auto key = [&](const RoundRecord& r) { return data.ood_test.empty() ? r.val_loss : r.ood.loss; };
    for (std::size_t i = 1; i < log.rounds.size(); ++i) {
        if (key(log.rounds[i]) < key(log.rounds[log.best])) log.best = i;
    }

    const RoundRecord& best = log.rounds[log.best];
    std::vector<double> groups;
    if (!best.per_subenv_accuracy.empty()) {
        for (const auto& [name, acc] : best.per_subenv_accuracy) groups.push_back(acc);
    } else {
        groups = best.per_silo_accuracy;
    }
    const bool any_correct = std::any_of(groups.begin(), groups.end(), [](double a) { return a > 0.0; });
    log.fairness = groups.size() >= 2 && any_correct ? fairness_stats(groups) : FairnessStats{kNaN, kNaN, kNaN};
    log.final_params = std::move(state.w);
    return log;
}

}  // namespace fedilc
