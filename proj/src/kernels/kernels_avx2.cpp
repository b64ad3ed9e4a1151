// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

#include "fedilc/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace fedilc::kernels {
namespace {

double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    if (i + 4 <= n) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        i += 4;
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void accumulate_moments_avx2(const double* x, double* sum, double* sum_sq, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        _mm256_storeu_pd(sum + i, _mm256_add_pd(_mm256_loadu_pd(sum + i), v));
        _mm256_storeu_pd(sum_sq + i, _mm256_add_pd(_mm256_loadu_pd(sum_sq + i), _mm256_mul_pd(v, v)));
    }
    for (; i < n; ++i) {
        sum[i] += x[i];
        sum_sq[i] += x[i] * x[i];
    }
}

// Same operation order as the scalar kernel and no fused multiply-add, so
// results are bit-identical to it.
void adam_update_avx2(const AdamCoeffs& c, const double* grad, double* param, double* m, double* v,
                      std::size_t n) {
    const double one_minus_b1 = 1.0 - c.beta1;
    const double one_minus_b2 = 1.0 - c.beta2;
    const __m256d b1 = _mm256_set1_pd(c.beta1);
    const __m256d b2 = _mm256_set1_pd(c.beta2);
    const __m256d omb1 = _mm256_set1_pd(one_minus_b1);
    const __m256d omb2 = _mm256_set1_pd(one_minus_b2);
    const __m256d bias1 = _mm256_set1_pd(c.bias1);
    const __m256d bias2 = _mm256_set1_pd(c.bias2);
    const __m256d eps = _mm256_set1_pd(c.eps);
    const __m256d lr = _mm256_set1_pd(c.lr);
    const __m256d decay = _mm256_set1_pd(c.decay_factor);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d g = _mm256_loadu_pd(grad + i);
        const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(omb1, g));
        const __m256d vi =
            _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)), _mm256_mul_pd(omb2, _mm256_mul_pd(g, g)));
        _mm256_storeu_pd(m + i, mi);
        _mm256_storeu_pd(v + i, vi);
        const __m256d m_hat = _mm256_div_pd(mi, bias1);
        const __m256d v_hat = _mm256_div_pd(vi, bias2);
        const __m256d step = _mm256_div_pd(_mm256_mul_pd(lr, m_hat), _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps));
        const __m256d p = _mm256_mul_pd(_mm256_loadu_pd(param + i), decay);
        _mm256_storeu_pd(param + i, _mm256_sub_pd(p, step));
    }
    for (; i < n; ++i) {
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

const KernelTable& avx2_table() noexcept {
    static const KernelTable table{Isa::avx2, dot_avx2, axpy_avx2, scale_avx2, accumulate_moments_avx2,
                                   adam_update_avx2};
    return table;
}

}  // namespace fedilc::kernels

#endif
