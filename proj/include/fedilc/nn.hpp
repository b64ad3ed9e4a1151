#pragma once

// Fixed-family feed-forward network: dense layers, ReLU hidden activations and
// either a sigmoid/BCE or softmax/CE head. Parameters live in one flat vector
// so that gradients can be aggregated coordinatewise across clients.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedilc/matrix.hpp"

namespace fedilc {

enum class Activation { relu };
enum class Head { sigmoid_bce, softmax_ce };

std::string_view to_string(Head head) noexcept;
Head parse_head(std::string_view text);

struct ModelSpec {
    std::vector<std::size_t> layer_sizes;  // input, hidden..., output
    Activation activation = Activation::relu;
    Head head = Head::sigmoid_bce;

    /// Throws std::invalid_argument on empty layers or a head/output mismatch.
    void validate() const;

    std::size_t input_size() const { return layer_sizes.front(); }
    std::size_t output_size() const { return layer_sizes.back(); }
    std::size_t num_dense() const { return layer_sizes.size() - 1; }
    std::size_t penultimate_size() const { return layer_sizes[layer_sizes.size() - 2]; }
    /// Number of final-layer parameters (weights then bias).
    std::size_t head_size() const { return output_size() * (penultimate_size() + 1); }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct LayerLayout {
    std::size_t layer;  // dense layer index, 0-based
    std::size_t rows;   // outputs
    std::size_t cols;   // inputs
    std::size_t offset;

    std::size_t weight_count() const { return rows * cols; }
    std::size_t bias_offset() const { return offset + weight_count(); }
    std::size_t end() const { return bias_offset() + rows; }

    friend bool operator==(const LayerLayout&, const LayerLayout&) = default;
};

std::vector<LayerLayout> make_layout(const ModelSpec& spec);

/// Flat parameter (or gradient) vector with its layer layout. Each layer
/// stores its row-major weight matrix followed by its bias; the final layer's
/// block is therefore contiguous and is the "head" block.
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(const ModelSpec& spec);

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }
    const std::vector<LayerLayout>& layout() const noexcept { return layout_; }

    std::span<double> weights(std::size_t layer);
    std::span<const double> weights(std::size_t layer) const;
    std::span<double> bias(std::size_t layer);
    std::span<const double> bias(std::size_t layer) const;

    std::span<double> head_block();
    std::span<const double> head_block() const;
    std::size_t head_offset() const { return layout_.back().offset; }

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    std::vector<double> values_;
    std::vector<LayerLayout> layout_;
};

struct Batch {
    Matrix inputs;            // n x d
    std::vector<int> labels;  // class index, or {0,1} for the sigmoid head

    std::size_t size() const { return labels.size(); }
    void validate(const ModelSpec& spec) const;
};

struct ForwardResult {
    Matrix logits;       // n x k, before the head nonlinearity
    Matrix penultimate;  // n x h, input to the final dense layer
};

/// Glorot-uniform weights, zero biases.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

ForwardResult forward(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs);

/// Mean loss over the batch.
double compute_loss(const Matrix& logits, std::span<const int> labels, Head head);

/// dLoss_i/dlogits_i for each sample (not divided by n): sigma(z)-y or softmax(z)-onehot(y).
Matrix head_residuals(const Matrix& logits, std::span<const int> labels, Head head);

/// Predicted probability of the positive class (sigmoid head) or of the
/// argmax class (softmax head) and the predicted label, per sample.
struct Predictions {
    std::vector<double> scores;
    std::vector<int> labels;
};
Predictions predict(const Matrix& logits, Head head);

struct LossAndGrad {
    double loss;
    ParamVector grad;
};

/// Exact batch-mean loss gradient with respect to every parameter.
LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch);
ParamVector backward_full(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// Per-sample gradients of the final dense layer only: row i is
/// residual_i (x) [h_i; 1], laid out like the head block (weights row-major, then bias).
Matrix per_sample_head_grads(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels);
Matrix per_sample_head_grads(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    /// Fresh optimizer state with the same hyperparameters, sized for n parameters.
    AdamState fresh(std::size_t n) const;
};

/// Adam with bias correction and decoupled weight decay:
/// w <- w * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

/// Plain gradient descent with the same decoupled decay.
void sgd_step(double lr, double weight_decay, std::span<double> params, std::span<const double> grad);

}  // namespace fedilc
