#pragma once

#include <Eigen/Dense>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE2__) || defined(__x86_64__)
#include <xmmintrin.h>
#endif

namespace miva {

// Subnormal intermediates (softmax tails, near-zero low-rank products) make
// x86 gemm kernels an order of magnitude slower on denoised latents. Flush
// them to zero process-wide; the setting is deterministic, so results stay
// bitwise reproducible across runs.
#if defined(__SSE2__) || defined(__x86_64__)
struct DenormalFlushInit {
    DenormalFlushInit() { _mm_setcsr(_mm_getcsr() | 0x8040); }  // FTZ | DAZ
};
inline DenormalFlushInit denormal_flush_init;
#endif

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matf = Mat<float>;
using Matd = Mat<double>;

struct dim_error : std::runtime_error {
    explicit dim_error(const std::string& m) : std::runtime_error(m) {}
};
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& m) : std::runtime_error(m) {}
};
struct io_error : std::runtime_error {
    explicit io_error(const std::string& m) : std::runtime_error(m) {}
};
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& m) : std::runtime_error(m) {}
};
struct protocol_error : std::runtime_error {
    explicit protocol_error(const std::string& m) : std::runtime_error(m) {}
};

inline std::string strf(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[1024];
    vsnprintf(buf, sizeof(buf), fmt, ap);
    va_end(ap);
    return std::string(buf);
}

#define MIVA_CHECK(cond, ...) \
    do { \
        if (!(cond)) throw ::miva::dim_error(::miva::strf(__VA_ARGS__)); \
    } while (0)

#define MIVA_CHECK_IO(cond, ...) \
    do { \
        if (!(cond)) throw ::miva::io_error(::miva::strf(__VA_ARGS__)); \
    } while (0)

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

// FNV-1a over raw bytes; used to fingerprint parameter sets.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace miva
