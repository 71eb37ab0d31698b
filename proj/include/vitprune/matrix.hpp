#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string_view>

namespace vitprune {

// Dense row-major matrix, the single value type of the whole library.
// Row vectors are [1, n], column vectors [n, 1], scalars [1, 1].
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;
using MaskVec = Eigen::Array<bool, Eigen::Dynamic, 1>;

// -- seeded RNG substreams -- //
//
// All randomness in the project derives from one 64-bit seed through named
// substreams, so that any component can be re-run in isolation and still
// reproduce the whole pipeline bit for bit.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t hash_name(std::string_view name) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t substream(uint64_t seed, std::string_view name, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = splitmix64(seed ^ hash_name(name));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return h;
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view name, uint64_t a = 0,
                                uint64_t b = 0) {
    return std::mt19937_64(substream(seed, name, a, b));
}

template <typename Scalar>
Mat<Scalar> randn(std::mt19937_64& rng, Index rows, Index cols, Scalar stddev = Scalar(1)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Mat<Scalar> m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            m(i, j) = static_cast<Scalar>(dist(rng)) * stddev;
        }
    }
    return m;
}

template <typename Scalar>
Mat<Scalar> rand_uniform(std::mt19937_64& rng, Index rows, Index cols, Scalar lo = Scalar(0),
                         Scalar hi = Scalar(1)) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    Mat<Scalar> m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            m(i, j) = static_cast<Scalar>(dist(rng));
        }
    }
    return m;
}

}  // namespace vitprune
