#pragma once

#include "cflow/types.hpp"

#include <random>
#include <string_view>

namespace cflow {

// splitmix64 finalizer, used to turn related seeds into unrelated streams.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derive an independent stream seed from a master seed and a purpose tag,
// so the draw order of one pipeline stage cannot perturb another.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return mix64(master ^ mix64(h));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    // Child stream derived from the original seed, independent of draw position.
    Rng fork(std::uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + 0x51ed2701))); }
    Rng fork(std::string_view tag) const { return Rng(derive_seed(seed_, tag)); }

    Real uniform(Real lo = 0.0, Real hi = 1.0) {
        return std::uniform_real_distribution<Real>(lo, hi)(engine_);
    }

    Real normal() { return normal_(engine_); }

    std::uint64_t next_u64() { return engine_(); }

    Index uniform_index(Index n) {
        return static_cast<Index>(std::uniform_int_distribution<std::uint64_t>(0, static_cast<std::uint64_t>(n) - 1)(engine_));
    }

    Vec normal_vec(Index n) {
        Vec v(n);
        for (Index i = 0; i < n; ++i) v[i] = normal_(engine_);
        return v;
    }

    // Column-major fill: column j is sample j.
    Mat normal_mat(Index rows, Index cols) {
        Mat m(rows, cols);
        for (Index j = 0; j < cols; ++j)
            for (Index i = 0; i < rows; ++i) m(i, j) = normal_(engine_);
        return m;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<Real> normal_{0.0, 1.0};
};

}  // namespace cflow
