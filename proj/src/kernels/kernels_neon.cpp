#include "fedilc/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace fedilc::kernels {
namespace {

double dot_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    double s = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(double alpha, double* x, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_f64(va, vld1q_f64(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void accumulate_moments_neon(const double* x, double* sum, double* sum_sq, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t v = vld1q_f64(x + i);
        vst1q_f64(sum + i, vaddq_f64(vld1q_f64(sum + i), v));
        vst1q_f64(sum_sq + i, vaddq_f64(vld1q_f64(sum_sq + i), vmulq_f64(v, v)));
    }
    for (; i < n; ++i) {
        sum[i] += x[i];
        sum_sq[i] += x[i] * x[i];
    }
}

void adam_update_neon(const AdamCoeffs& c, const double* grad, double* param, double* m, double* v,
                      std::size_t n) {
    const double one_minus_b1 = 1.0 - c.beta1;
    const double one_minus_b2 = 1.0 - c.beta2;
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t g = vld1q_f64(grad + i);
        const float64x2_t mi =
            vaddq_f64(vmulq_f64(vdupq_n_f64(c.beta1), vld1q_f64(m + i)), vmulq_f64(vdupq_n_f64(one_minus_b1), g));
        const float64x2_t vi = vaddq_f64(vmulq_f64(vdupq_n_f64(c.beta2), vld1q_f64(v + i)),
                                         vmulq_f64(vdupq_n_f64(one_minus_b2), vmulq_f64(g, g)));
        vst1q_f64(m + i, mi);
        vst1q_f64(v + i, vi);
        const float64x2_t m_hat = vdivq_f64(mi, vdupq_n_f64(c.bias1));
        const float64x2_t v_hat = vdivq_f64(vi, vdupq_n_f64(c.bias2));
        const float64x2_t step = vdivq_f64(vmulq_f64(vdupq_n_f64(c.lr), m_hat),
                                           vaddq_f64(vsqrtq_f64(v_hat), vdupq_n_f64(c.eps)));
        const float64x2_t p = vmulq_f64(vld1q_f64(param + i), vdupq_n_f64(c.decay_factor));
        vst1q_f64(param + i, vsubq_f64(p, step));
    }
    for (; i < n; ++i) {
        const double g = grad[i];
        const double mi = c.beta1 * m[i] + one_minus_b1 * g;
        const double vi = c.beta2 * v[i] + one_minus_b2 * (g * g);
        m[i] = mi;
        v[i] = vi;
        param[i] = param[i] * c.decay_factor - c.lr * (mi / c.bias1) / (std::sqrt(vi / c.bias2) + c.eps);
    }
}

}  // namespace

const KernelTable& neon_table() noexcept {
    static const KernelTable table{Isa::neon, dot_neon, axpy_neon, scale_neon, accumulate_moments_neon,
                                   adam_update_neon};
    return table;
}

}  // namespace fedilc::kernels

#endif
