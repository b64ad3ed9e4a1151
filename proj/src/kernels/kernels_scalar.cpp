#include "fedilc/kernels.hpp"

#include <cmath>

namespace fedilc::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void accumulate_moments_scalar(const double* x, double* sum, double* sum_sq, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        sum[i] += x[i];
        sum_sq[i] += x[i] * x[i];
    }
}

void adam_update_scalar(const AdamCoeffs& c, const double* grad, double* param, double* m, double* v,
                        std::size_t n) {
    const double one_minus_b1 = 1.0 - c.beta1;
    const double one_minus_b2 = 1.0 - c.beta2;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        const double mi = c.beta1 * m[i] + one_minus_b1 * g;
        const double vi = c.beta2 * v[i] + one_minus_b2 * (g * g);
        m[i] = mi;
        v[i] = vi;
        const double m_hat = mi / c.bias1;
        const double v_hat = vi / c.bias2;
        param[i] = param[i] * c.decay_factor - c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
}

}  // namespace

const KernelTable& scalar_table() noexcept {
    static const KernelTable table{Isa::scalar,       dot_scalar,        axpy_scalar, scale_scalar,
                                   accumulate_moments_scalar, adam_update_scalar};
    return table;
}

}  // namespace fedilc::kernels
