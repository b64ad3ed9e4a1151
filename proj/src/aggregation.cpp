#include "fedilc/aggregation.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "fedilc/kernels.hpp"

namespace fedilc {

namespace {

std::size_t check_set(GradientSet grads, const char* who) {
    if (grads.empty()) throw std::invalid_argument(std::string(who) + ": empty gradient set");
    const std::size_t dim = grads.front().size();
    for (const auto& g : grads) {
        if (g.size() != dim) throw std::invalid_argument(std::string(who) + ": gradient length mismatch");
        for (double x : g) {
            if (!std::isfinite(x)) throw std::invalid_argument(std::string(who) + ": non-finite gradient entry");
        }
    }
    return dim;
}

}  // namespace

std::vector<double> arith_mean(GradientSet grads) {
    const std::size_t dim = check_set(grads, "arith_mean");
    std::vector<double> out(dim, 0.0);
    for (const auto& g : grads) {
        for (std::size_t k = 0; k < dim; ++k) out[k] += g[k];
    }
    const double inv = 1.0 / static_cast<double>(grads.size());
    for (double& x : out) x *= inv;
    return out;
}

std::vector<double> weighted_geo_mean(GradientSet grads) {
    const std::size_t dim = check_set(grads, "weighted_geo_mean");
    // One environment is its own mean; skip the exp/log round trip.
    if (grads.size() == 1) return {grads.front().begin(), grads.front().end()};
    const auto total = static_cast<double>(grads.size());
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        double pos_log = 0.0;
        double neg_log = 0.0;
        std::size_t pos = 0;
        std::size_t neg = 0;
        bool pos_zero = false;
        for (const auto& g : grads) {
            const double x = g[k];
            if (x > 0.0) {
                pos_log += std::log(x);
                ++pos;
            } else if (x < 0.0) {
                neg_log += std::log(-x);
                ++neg;
            } else {
                pos_zero = true;
                ++pos;
            }
        }
        double result = 0.0;
        if (pos > 0 && !pos_zero) {
            const auto p = static_cast<double>(pos);
            result += (p / total) * std::exp(pos_log / p);
        }
        if (neg > 0) {
            const auto q = static_cast<double>(neg);
            result -= (q / total) * std::exp(neg_log / q);
        }
        out[k] = result;
    }
    return out;
}

std::vector<double> abs_geo_mean(GradientSet grads) {
    const std::size_t dim = check_set(grads, "abs_geo_mean");
    const auto total = static_cast<double>(grads.size());
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        double log_sum = 0.0;
        bool zero = false;
        for (const auto& g : grads) {
            const double a = std::abs(g[k]);
            if (a == 0.0) {
                zero = true;
                break;
            }
            log_sum += std::log(a);
        }
        out[k] = zero ? 0.0 : std::exp(log_sum / total);
    }
    return out;
}

VarianceDiag grad_variance_diag(const Matrix& per_sample) {
    if (per_sample.rows() == 0) throw std::invalid_argument("grad_variance_diag: no samples");
    const std::size_t n = per_sample.rows();
    const std::size_t dim = per_sample.cols();
    const auto& k = kernels::active();

    // Moments of the deviation from the first sample: exact zeros for
    // identical rows, and less cancellation than raw moments.
    const auto shift = per_sample.row(0);
    std::vector<double> dev(dim);
    std::vector<double> sum(dim, 0.0);
    std::vector<double> sum_sq(dim, 0.0);
    for (std::size_t i = 1; i < n; ++i) {
        const auto r = per_sample.row(i);
        for (std::size_t c = 0; c < dim; ++c) dev[c] = r[c] - shift[c];
        k.accumulate_moments(dev.data(), sum.data(), sum_sq.data(), dim);
    }
    VarianceDiag out;
    out.sample_count = n;
    out.values.resize(dim);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t c = 0; c < dim; ++c) {
        const double mean = sum[c] * inv_n;
        const double var = sum_sq[c] * inv_n - mean * mean;
        out.values[c] = var > 0.0 ? var : 0.0;
    }
    return out;
}

std::vector<double> mean_variance(std::span<const VarianceDiag> diags) {
    if (diags.empty()) throw std::invalid_argument("mean_variance: no clients");
    const std::size_t dim = diags.front().values.size();
    for (const auto& d : diags) {
        if (d.values.size() != dim) throw std::invalid_argument("mean_variance: length mismatch");
    }
    // Shifted by the first client so identical inputs give an exact copy.
    const auto& base = diags.front().values;
    std::vector<double> out(dim, 0.0);
    for (std::size_t e = 1; e < diags.size(); ++e) {
        for (std::size_t c = 0; c < dim; ++c) out[c] += diags[e].values[c] - base[c];
    }
    const double inv = 1.0 / static_cast<double>(diags.size());
    for (std::size_t c = 0; c < dim; ++c) out[c] = base[c] + out[c] * inv;
    return out;
}

double fishr_loss(std::span<const VarianceDiag> diags) {
    const auto mean = mean_variance(diags);
    double total = 0.0;
    for (const auto& d : diags) {
        for (std::size_t c = 0; c < mean.size(); ++c) {
            const double diff = d.values[c] - mean[c];
            total += diff * diff;
        }
    }
    return total / static_cast<double>(diags.size());
}

double fishr_penalty(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels,
                     std::span<const double> target) {
    const VarianceDiag v = grad_variance_diag(per_sample_head_grads(spec, fwd, labels));
    if (target.size() != v.values.size()) throw std::invalid_argument("fishr_penalty: target length mismatch");
    double total = 0.0;
    for (std::size_t c = 0; c < target.size(); ++c) {
        const double d = v.values[c] - target[c];
        total += d * d;
    }
    return total;
}

std::vector<double> fishr_penalty_grad(const ModelSpec& spec, const ForwardResult& fwd, std::span<const int> labels,
                                       std::span<const double> target) {
    const std::size_t n = labels.size();
    const std::size_t h = fwd.penultimate.cols();
    const std::size_t k = fwd.logits.cols();
    if (target.size() != k * (h + 1)) throw std::invalid_argument("fishr_penalty_grad: target length mismatch");

    const Matrix g = per_sample_head_grads(spec, fwd, labels);
    const VarianceDiag v = grad_variance_diag(g);

    std::vector<double> mean(g.cols(), 0.0);
    for (std::size_t i = 0; i < n; ++i) kernels::axpy(1.0, g.row(i), mean);
    for (double& m : mean) m /= static_cast<double>(n);

    // dP/dg_ic = (4/n) (v_c - target_c) (g_ic - mean_c)
    std::vector<double> coef(g.cols());
    for (std::size_t c = 0; c < g.cols(); ++c) coef[c] = 4.0 / static_cast<double>(n) * (v.values[c] - target[c]);

    const Matrix r = head_residuals(fwd.logits, labels, spec.head);
    std::vector<double> out(g.cols(), 0.0);
    std::vector<double> s(k);
    for (std::size_t i = 0; i < n; ++i) {
        const auto gi = g.row(i);
        const auto hi = fwd.penultimate.row(i);
        // s_j = sum_a dP/dg_{i,(j,a)} * [h_i; 1]_a, the sensitivity to residual r_ij.
        for (std::size_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::size_t a = 0; a < h; ++a) {
                const std::size_t c = j * h + a;
                acc += coef[c] * (gi[c] - mean[c]) * hi[a];
            }
            const std::size_t cb = k * h + j;
            acc += coef[cb] * (gi[cb] - mean[cb]);
            s[j] = acc;
        }
        // Chain through the residual to the logits.
        const auto ri = r.row(i);
        const auto label = static_cast<std::size_t>(labels[i]);
        auto prob = [&](std::size_t j) {
            return spec.head == Head::sigmoid_bce ? ri[0] + static_cast<double>(labels[i])
                                                  : ri[j] + (label == j ? 1.0 : 0.0);
        };
        double sp = 0.0;
        if (spec.head == Head::softmax_ce) {
            for (std::size_t j = 0; j < k; ++j) sp += s[j] * prob(j);
        }
        for (std::size_t l = 0; l < k; ++l) {
            const double p = prob(l);
            const double dz = spec.head == Head::sigmoid_bce ? s[0] * p * (1.0 - p) : p * (s[l] - sp);
            if (dz == 0.0) continue;
            kernels::axpy(dz, hi, std::span<double>(out).subspan(l * h, h));
            out[k * h + l] += dz;
        }
    }
    return out;
}

std::vector<double> fishr_penalty_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                       std::span<const double> target) {
    batch.validate(spec);
    return fishr_penalty_grad(spec, forward(spec, params, batch.inputs), batch.labels, target);
}

}  // namespace fedilc
