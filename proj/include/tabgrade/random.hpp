#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace tabgrade {

// Seeded generator with portable derived distributions. The standard
// <random> distributions are implementation-defined, so everything that has
// to be reproducible bit-for-bit goes through this class instead.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::size_t uniform_index(std::size_t n);

    // Uniform real in [0, 1) with 53 random bits.
    double uniform01();

    // Standard normal via Box-Muller.
    double normal();

    // Fisher-Yates shuffle of indices [0, n).
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; derives independent stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace tabgrade
