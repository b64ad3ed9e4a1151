#pragma once

// Experiment configuration, dataset assembly and result files for the
// command-line runner.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedilc/datasets.hpp"
#include "fedilc/federation.hpp"

namespace fedilc {

/// Invalid configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DatasetKind { color_digits, rotated, synth_spurious, synth_clinical, clinical_csv };

std::string_view to_string(DatasetKind kind) noexcept;
DatasetKind parse_dataset_kind(std::string_view text);

struct ExperimentConfig {
    DatasetKind dataset = DatasetKind::synth_spurious;
    AlgoMode mode = AlgoMode::fed_sgd;
    std::size_t rounds = 500;
    std::size_t batch_size = 64;
    std::size_t geo_chunk = 8;
    Optimizer optimizer = Optimizer::adam;
    // Unset values take per-dataset defaults in finalize().
    std::optional<double> lr;
    std::optional<double> weight_decay;
    std::optional<double> lambda;
    std::optional<std::vector<std::size_t>> hidden;
    std::vector<std::uint64_t> seeds{0};
    std::uint64_t data_seed = 0;
    std::filesystem::path output_dir = "out";
    std::size_t jobs = 1;

    // synth_spurious / color_digits
    std::size_t n_per_silo = 1000;
    std::size_t d_inv = 10;
    std::vector<double> flip_probs{0.15, 0.30, 0.45, 0.60, 0.75};
    std::optional<double> ood_flip;        // spurious: 0.90; color_digits: colour flip 0.90
    double ood_label_flip = 0.15;          // color_digits only
    std::filesystem::path mnist_images;    // default: $FEDILC_DATA_DIR/mnist/train-images-idx3-ubyte
    std::filesystem::path mnist_labels;
    std::size_t mnist_limit = 0;           // 0 keeps every image

    // rotated
    std::string rotated_source = "cifar";  // cifar | synth
    std::vector<std::filesystem::path> cifar_files;  // default: $FEDILC_DATA_DIR/cifar-10-batches-bin/data_batch_{1..5}.bin
    std::size_t cifar_limit = 6000;
    std::size_t n_synth_images = 3000;
    std::vector<std::vector<double>> silo_degrees{{10, 25, 40}, {60, 75, 90}, {-10, -40, -90}};
    std::pair<double, double> ood_degrees{-90.0, 90.0};

    // synth_clinical / clinical_csv
    std::size_t n_hospitals = 58;
    std::size_t n_features = 200;
    std::size_t n_patients = 30760;
    double positive_rate = 0.305;
    std::filesystem::path clinical_csv;

    /// Applies one `key = value` setting. Throws ConfigError.
    void set(std::string_view key, std::string_view value);
    /// Fills dataset defaults and validates. Throws ConfigError.
    void finalize();

    double effective_lr() const { return lr.value_or(1e-3); }
    double effective_lambda() const { return lambda.value_or(0.0); }
};

/// Flat `key = value` lines; `#` starts a comment; lists are comma separated.
ExperimentConfig parse_config_text(std::string_view text);
ExperimentConfig load_config_file(const std::filesystem::path& path);

FederationDataset build_dataset(const ExperimentConfig& config);
ModelSpec model_for(const ExperimentConfig& config, const FederationDataset& data);
RoundConfig round_config(const ExperimentConfig& config, std::uint64_t seed);

/// One log per configured seed, in seed order. Seeds run on up to
/// config.jobs threads.
std::vector<RoundLog> run_seeds(const ExperimentConfig& config, const FederationDataset& data, const ModelSpec& spec);

/// Columns: round,train_loss,val_loss,ood_loss,ood_acc,ood_auroc,ood_auprc.
std::string round_csv(const RoundLog& log);
nlohmann::json summary_json(const ExperimentConfig& config, const std::vector<RoundLog>& logs);
/// JSON text with every float printed to 17 significant digits; NaN as null.
std::string dump_json17(const nlohmann::json& j, int indent = 2);

/// Writes rounds_seed<s>.csv per seed and summary.json into config.output_dir.
void write_run_outputs(const ExperimentConfig& config, const std::vector<RoundLog>& logs);

struct SweepRow {
    double lambda;
    SeedSummary min_ood_loss;
};

/// Runs every lambda with the same seeds; each run's files go to
/// output_dir/lambda_<i>. Throws ConfigError on an empty or duplicated list.
std::vector<SweepRow> sweep_lambda(const ExperimentConfig& config, const std::vector<double>& lambdas);
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Entry point shared by the executable and the tests.
int cli_main(int argc, char** argv);

}  // namespace fedilc
