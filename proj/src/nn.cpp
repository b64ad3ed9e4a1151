#include "fedilc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedilc/kernels.hpp"
#include "fedilc/random.hpp"

namespace fedilc {

std::string_view to_string(Head head) noexcept {
    return head == Head::sigmoid_bce ? "sigmoid_bce" : "softmax_ce";
}

Head parse_head(std::string_view text) {
    if (text == "sigmoid_bce") return Head::sigmoid_bce;
    if (text == "softmax_ce") return Head::softmax_ce;
    throw std::invalid_argument("unknown head: " + std::string(text));
}

void ModelSpec::validate() const {
    if (layer_sizes.size() < 2) throw std::invalid_argument("ModelSpec: need at least input and output layers");
    for (std::size_t s : layer_sizes) {
        if (s == 0) throw std::invalid_argument("ModelSpec: layer sizes must be >= 1");
    }
    const bool single = output_size() == 1;
    if (head == Head::sigmoid_bce && !single) throw std::invalid_argument("ModelSpec: sigmoid_bce head needs 1 output");
    if (head == Head::softmax_ce && single) throw std::invalid_argument("ModelSpec: softmax_ce head needs >= 2 outputs");
}

std::vector<LayerLayout> make_layout(const ModelSpec& spec) {
    spec.validate();
    std::vector<LayerLayout> layout;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
        LayerLayout entry{l, spec.layer_sizes[l + 1], spec.layer_sizes[l], offset};
        offset = entry.end();
        layout.push_back(entry);
    }
    return layout;
}

ParamVector::ParamVector(const ModelSpec& spec) : layout_(make_layout(spec)) {
    values_.assign(layout_.back().end(), 0.0);
}

std::span<double> ParamVector::weights(std::size_t layer) {
    const auto& e = layout_.at(layer);
    return std::span<double>(values_).subspan(e.offset, e.weight_count());
}
std::span<const double> ParamVector::weights(std::size_t layer) const {
    const auto& e = layout_.at(layer);
    return std::span<const double>(values_).subspan(e.offset, e.weight_count());
}
std::span<double> ParamVector::bias(std::size_t layer) {
    const auto& e = layout_.at(layer);
    return std::span<double>(values_).subspan(e.bias_offset(), e.rows);
}
std::span<const double> ParamVector::bias(std::size_t layer) const {
    const auto& e = layout_.at(layer);
    return std::span<const double>(values_).subspan(e.bias_offset(), e.rows);
}
std::span<double> ParamVector::head_block() {
    return std::span<double>(values_).subspan(head_offset());
}
std::span<const double> ParamVector::head_block() const {
    return std::span<const double>(values_).subspan(head_offset());
}

void Batch::validate(const ModelSpec& spec) const {
    if (labels.empty()) throw std::invalid_argument("Batch: empty");
    if (inputs.rows() != labels.size()) throw std::invalid_argument("Batch: inputs/labels row mismatch");
    if (inputs.cols() != spec.input_size()) throw std::invalid_argument("Batch: feature width does not match model input");
    const int classes = spec.head == Head::sigmoid_bce ? 2 : static_cast<int>(spec.output_size());
    for (int y : labels) {
        if (y < 0 || y >= classes) throw std::invalid_argument("Batch: label out of range");
    }
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
    ParamVector params(spec);
    Rng rng(seed);
    for (const auto& e : params.layout()) {
        const double limit = std::sqrt(6.0 / static_cast<double>(e.rows + e.cols));
        for (double& w : params.weights(e.layer)) w = rng.uniform(-limit, limit);
    }
    return params;
}

namespace {

void check_params(const ModelSpec& spec, const ParamVector& params) {
    if (params.layout() != make_layout(spec)) throw std::invalid_argument("parameter layout does not match model spec");
}

// Z = A W^T + b for one dense layer.
Matrix dense(const Matrix& a, std::span<const double> w, std::span<const double> b, std::size_t out) {
    const auto& k = kernels::active();
    const std::size_t in = a.cols();
    Matrix z(a.rows(), out);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i).data();
        auto zi = z.row(i);
        for (std::size_t j = 0; j < out; ++j) zi[j] = k.dot(ai, w.data() + j * in, in) + b[j];
    }
    return z;
}

void relu_inplace(Matrix& m) {
    for (double& x : m.values()) x = x > 0.0 ? x : 0.0;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// All layer inputs (activations), index 0 is the batch input; plus the
// pre-activations of hidden layers for the ReLU derivative.
struct Trace {
    std::vector<Matrix> inputs;
    Matrix logits;
};

Trace run_forward(const ModelSpec& spec, const ParamVector& params, const Matrix& x) {
    if (x.cols() != spec.input_size()) throw std::invalid_argument("forward: feature width does not match model input");
    check_params(spec, params);
    Trace trace;
    trace.inputs.reserve(spec.num_dense());
    trace.inputs.push_back(x);
    for (std::size_t l = 0; l < spec.num_dense(); ++l) {
        Matrix z = dense(trace.inputs.back(), params.weights(l), params.bias(l), spec.layer_sizes[l + 1]);
        if (l + 1 == spec.num_dense()) {
            trace.logits = std::move(z);
        } else {
            relu_inplace(z);
            trace.inputs.push_back(std::move(z));
        }
    }
    return trace;
}

}  // namespace

ForwardResult forward(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs) {
    Trace t = run_forward(spec, params, inputs);
    return ForwardResult{std::move(t.logits), std::move(t.inputs.back())};
}

double compute_loss(const Matrix& logits, std::span<const int> labels, Head head) {
    if (logits.rows() != labels.size() || labels.empty()) throw std::invalid_argument("compute_loss: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto z = logits.row(i);
        if (head == Head::sigmoid_bce) {
            // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
            total += labels[i] == 1 ? softplus(-z[0]) : softplus(z[0]);
        } else {
            const double zmax = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (double v : z) sum += std::exp(v - zmax);
            total += zmax + std::log(sum) - z[static_cast<std::size_t>(labels[i])];
        }
    }
    return total / static_cast<double>(labels.size());
}

Matrix head_residuals(const Matrix& logits, std::span<const int> labels, Head head) {
    if (logits.rows() != labels.size()) throw std::invalid_argument("head_residuals: shape mismatch");
    Matrix r(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto z = logits.row(i);
        auto ri = r.row(i);
        if (head == Head::sigmoid_bce) {
            ri[0] = sigmoid(z[0]) - static_cast<double>(labels[i]);
        } else {
            const double zmax = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (std::size_t j = 0; j < z.size(); ++j) {
                ri[j] = std::exp(z[j] - zmax);
                sum += ri[j];
            }
            for (double& v : ri) v /= sum;
            ri[static_cast<std::size_t>(labels[i])] -= 1.0;
        }
    }
    return r;
}

Predictions predict(const Matrix& logits, Head head) {
    Predictions p;
    p.scores.reserve(logits.rows());
    p.labels.reserve(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto z = logits.row(i);
        if (head == Head::sigmoid_bce) {
            const double s = sigmoid(z[0]);
            p.scores.push_back(s);
            p.labels.push_back(z[0] > 0.0 ? 1 : 0);
        } else {
            const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
            double sum = 0.0;
            for (double v : z) sum += std::exp(v - z[best]);
            p.scores.push_back(1.0 / sum);
            p.labels.push_back(static_cast<int>(best));
        }
    }
    return p;
}

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    batch.validate(spec);
    const auto& k = kernels::active();
    Trace trace = run_forward(spec, params, batch.inputs);
    const double loss = compute_loss(trace.logits, batch.labels, spec.head);

    ParamVector grad(spec);
    const std::size_t n = batch.size();
    Matrix delta = head_residuals(trace.logits, batch.labels, spec.head);
    k.scale(1.0 / static_cast<double>(n), delta.values().data(), delta.values().size());

    for (std::size_t l = spec.num_dense(); l-- > 0;) {
        const Matrix& a = trace.inputs[l];
        const std::size_t out = delta.cols();
        const std::size_t in = a.cols();
        auto dw = grad.weights(l);
        auto db = grad.bias(l);
        for (std::size_t i = 0; i < n; ++i) {
            const auto di = delta.row(i);
            const double* ai = a.row(i).data();
            for (std::size_t j = 0; j < out; ++j) {
                if (di[j] == 0.0) continue;
                k.axpy(di[j], ai, dw.data() + j * in, in);
                db[j] += di[j];
            }
        }
        if (l == 0) break;
        // Propagate through W_l and the ReLU that produced a = inputs[l].
        const auto w = params.weights(l);
        Matrix prev(n, in);
        for (std::size_t i = 0; i < n; ++i) {
            const auto di = delta.row(i);
            double* pi = prev.row(i).data();
            for (std::size_t j = 0; j < out; ++j) {
                if (di[j] == 0.0) continue;
                k.axpy(di[j], w.data() + j * in, pi, in);
            }
            const auto ai = a.row(i);
            for (std::size_t c = 0; c < in; ++c) {
                if (ai[c] <= 0.0) pi[c] = 0.0;
            }
        }
        delta = std::move(prev);
    }
    return LossAndGrad{loss, std::move(grad)};
}

ParamVector backward_full(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    return loss_and_grad(spec, params, batch).grad;
}

Matrix per_sample_head_grads(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels) {
    const Matrix r = head_residuals(fwd.logits, labels, spec.head);
    const std::size_t h = fwd.penultimate.cols();
    const std::size_t k = fwd.logits.cols();
    Matrix g(labels.size(), k * (h + 1));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto gi = g.row(i);
        const auto hi = fwd.penultimate.row(i);
        const auto ri = r.row(i);
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t c = 0; c < h; ++c) gi[j * h + c] = ri[j] * hi[c];
            gi[k * h + j] = ri[j];
        }
    }
    return g;
}

Matrix per_sample_head_grads(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    batch.validate(spec);
    return per_sample_head_grads(spec, forward(spec, params, batch.inputs), batch.labels);
}

AdamState AdamState::fresh(std::size_t n) const {
    AdamState s = *this;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    s.t = 0;
    return s;
}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
    if (params.size() != grad.size()) throw std::invalid_argument("adam_step: params/grad length mismatch");
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state length mismatch");
    }
    ++state.t;
    const auto t = static_cast<double>(state.t);
    const kernels::AdamCoeffs c{state.lr,
                                state.beta1,
                                state.beta2,
                                state.eps,
                                1.0 - state.lr * state.weight_decay,
                                1.0 - std::pow(state.beta1, t),
                                1.0 - std::pow(state.beta2, t)};
    kernels::active().adam_update(c, grad.data(), params.data(), state.m.data(), state.v.data(), params.size());
}

void sgd_step(double lr, double weight_decay, std::span<double> params, std::span<const double> grad) {
    if (params.size() != grad.size()) throw std::invalid_argument("sgd_step: params/grad length mismatch");
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) params[i] = params[i] * decay - lr * grad[i];
}

}  // namespace fedilc
