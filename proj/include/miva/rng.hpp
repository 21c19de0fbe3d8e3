#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "common.hpp"

namespace miva {

// splitmix64, used to derive independent sub-seeds from one master seed.
inline uint64_t split_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG. Gaussian sampling is hand-rolled Box-Muller so the byte
// stream never depends on the standard library's distribution internals.
struct Rng {
    std::mt19937_64 gen;
    double spare = 0.0;
    bool has_spare = false;

    explicit Rng(uint64_t seed = 0) : gen(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return (gen() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t randint(uint64_t n) {
        MIVA_CHECK(n > 0, "randint: n must be positive");
        return gen() % n;
    }

    double gaussian() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_gaussian(Mat<T>& m, double scale = 1.0) {
        for (Eigen::Index i = 0; i < m.rows(); i++)
            for (Eigen::Index j = 0; j < m.cols(); j++)
                m(i, j) = static_cast<T>(gaussian() * scale);
    }

    template <typename T>
    Mat<T> gaussian_mat(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
        Mat<T> m(r, c);
        fill_gaussian(m, scale);
        return m;
    }

    template <typename T>
    void fill_uniform(Mat<T>& m, double lo, double hi) {
        for (Eigen::Index i = 0; i < m.rows(); i++)
            for (Eigen::Index j = 0; j < m.cols(); j++)
                m(i, j) = static_cast<T>(uniform(lo, hi));
    }
};

}  // namespace miva
