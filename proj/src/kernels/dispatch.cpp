#include <cstdlib>
#include <string_view>

#include "fedilc/kernels.hpp"

namespace fedilc::kernels {

bool isa_supported(Isa isa) noexcept {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Isa::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

std::string_view isa_name(Isa isa) noexcept {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
        case Isa::neon:
            return "neon";
    }
    return "unknown";
}

namespace {

const KernelTable& table_for(Isa isa) noexcept {
#if defined(__x86_64__) || defined(_M_X64)
    if (isa == Isa::avx2) return avx2_table();
#endif
#if defined(__aarch64__)
    if (isa == Isa::neon) return neon_table();
#endif
    return scalar_table();
}

const KernelTable& select() noexcept {
    if (const char* forced = std::getenv("FEDILC_SIMD")) {
        const std::string_view want{forced};
        for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
            if (want == isa_name(isa) && isa_supported(isa)) return table_for(isa);
        }
    }
    for (Isa isa : {Isa::avx2, Isa::neon}) {
        if (isa_supported(isa)) return table_for(isa);
    }
    return scalar_table();
}

}  // namespace

const KernelTable& active() noexcept {
    static const KernelTable& table = select();
    return table;
}

}  // namespace fedilc::kernels
