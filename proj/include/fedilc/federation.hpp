#pragma once

// Round-based federated training: clients compute one gradient per round on
// their silo, the server combines them and takes one optimizer step.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedilc/aggregation.hpp"
#include "fedilc/datasets.hpp"
#include "fedilc/metrics.hpp"
#include "fedilc/nn.hpp"

namespace fedilc {

enum class AlgoMode { fed_sgd, geometric, fed_curv, fishr_inter_geo, fishr_intra_arith, fishr_intra_geo };

std::string_view to_string(AlgoMode mode) noexcept;
AlgoMode parse_algo_mode(std::string_view text);
const std::vector<AlgoMode>& all_algo_modes();

/// Whether the client adds the gradient-variance penalty (only if lambda > 0).
bool uses_penalty(AlgoMode mode) noexcept;
/// Whether the server combines client gradients with the weighted geometric mean.
bool geo_across_clients(AlgoMode mode) noexcept;
/// Whether clients split their batch into chunks and combine chunk gradients.
bool intra_silo(AlgoMode mode) noexcept;

enum class Optimizer { adam, sgd };

struct RoundConfig {
    AlgoMode mode = AlgoMode::fed_sgd;
    double lambda = 0.0;
    std::size_t rounds = 500;
    std::size_t batch_size = 64;
    std::size_t geo_chunk = 8;
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::adam;
    AdamState adam;  // template: lr, betas, eps, weight decay (also used by sgd)

    void validate() const;
};

struct ClientUpdate {
    std::size_t client_id = 0;
    std::vector<double> grad;
    VarianceDiag var_diag;
    std::size_t n = 0;

    friend bool operator==(const ClientUpdate&, const ClientUpdate&) = default;
};

struct ServerState {
    ParamVector w;
    AdamState adam;
    VarianceDiag v_bar_prev;
    std::int64_t round = 0;
};

ServerState init_server(const ModelSpec& spec, const RoundConfig& config);

/// Row indices of the client's round mini-batch: the whole silo in order when
/// batch_size >= n, otherwise a seeded draw without replacement.
std::vector<std::size_t> round_batch_indices(std::size_t n, std::size_t client_id, std::int64_t round,
                                             const RoundConfig& config);

/// One gradient over the round mini-batch, plus the penalty gradient on the head block.
ClientUpdate client_update_inter(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                                 std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                                 const RoundConfig& config);

/// Mini-batch split into consecutive geo_chunk-sized chunks whose full
/// gradients are combined (geometric, or arithmetic for fishr_intra_arith).
ClientUpdate client_update_intra(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                                 std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                                 const RoundConfig& config);

/// Dispatches on config.mode.
ClientUpdate client_update(const ModelSpec& spec, const LabeledDataset& data, std::size_t client_id,
                           std::int64_t round, const ParamVector& w, std::span<const double> v_bar_prev,
                           const RoundConfig& config);

/// Combines chunk gradients the way intra-silo clients do for `mode`.
std::vector<double> combine_chunk_grads(AlgoMode mode, GradientSet chunks);

/// Combines client gradients the way the server does for `mode`. Updates
/// must already be in ascending client_id order.
std::vector<double> combine_client_grads(AlgoMode mode, std::span<const ClientUpdate> updates);

/// Validates, sorts by client_id, combines, steps the optimizer and stores
/// the mean variance diagonal for the next round.
void server_round(ServerState& state, std::vector<ClientUpdate> updates, const RoundConfig& config);

struct RoundRecord {
    std::int64_t round = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    EvalReport ood;
    std::vector<double> per_silo_accuracy;              // validation accuracy per silo
    std::map<std::string, double> per_subenv_accuracy;  // validation, "silo<i>/env<j>"

    friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct RoundLog {
    std::vector<RoundRecord> rounds;
    std::size_t best = 0;  // index of the minimum-OOD-loss round (first on ties)
    FairnessStats fairness{};  // at the best round; NaN with fewer than two groups
    ParamVector final_params;

    const RoundRecord& best_round() const { return rounds.at(best); }
};

/// Evaluates w on every silo and the OOD set. Loss is pooled over samples.
RoundRecord evaluate(const ModelSpec& spec, const ParamVector& w, const FederationDataset& data);

/// Produces the round's client updates from the broadcast state. The default
/// source runs every client in process.
using UpdateSource = std::function<std::vector<ClientUpdate>(const ServerState&)>;

UpdateSource in_process_clients(const ModelSpec& spec, const FederationDataset& data, const RoundConfig& config);

RoundLog run_experiment(const FederationDataset& data, const RoundConfig& config, const ModelSpec& spec,
                        const UpdateSource& source = {});

}  // namespace fedilc
