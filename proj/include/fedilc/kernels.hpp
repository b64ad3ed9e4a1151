#pragma once

// Dense double-precision inner loops used by the MLP engine and the
// optimizer. Each kernel has a scalar reference implementation and SIMD
// variants; the active table is chosen once per process from CPU features
// (override with FEDILC_SIMD=scalar|avx2|neon).
//
// Reductions (dot, sum_sq) may differ from the scalar reference in the last
// bits because lanes change the summation order. Elementwise kernels that use
// only IEEE-exact operations (adam_update, scale) are bit-identical across
// variants.

#include <cstddef>
#include <span>
#include <string_view>

namespace fedilc::kernels {

enum class Isa { scalar, avx2, neon };

struct AdamCoeffs {
    double lr;
    double beta1;
    double beta2;
    double eps;
    double decay_factor;  // 1 - lr * weight_decay
    double bias1;         // 1 - beta1^t
    double bias2;         // 1 - beta2^t
};

struct KernelTable {
    Isa isa;
    double (*dot)(const double* a, const double* b, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // x *= alpha
    void (*scale)(double alpha, double* x, std::size_t n);
    // sum += x; sum_sq += x*x
    void (*accumulate_moments)(const double* x, double* sum, double* sum_sq, std::size_t n);
    void (*adam_update)(const AdamCoeffs& c, const double* grad, double* param, double* m, double* v,
                        std::size_t n);
};

const KernelTable& scalar_table() noexcept;
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table() noexcept;
#endif
#if defined(__aarch64__)
const KernelTable& neon_table() noexcept;
#endif

bool isa_supported(Isa isa) noexcept;

/// Table selected for this process.
const KernelTable& active() noexcept;

std::string_view isa_name(Isa isa) noexcept;

// Convenience wrappers over the active table.

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
    active().axpy(alpha, x.data(), y.data(), x.size());
}

inline void scale(double alpha, std::span<double> x) noexcept { active().scale(alpha, x.data(), x.size()); }

}  // namespace fedilc::kernels
