#pragma once

#include <cstdint>
#include <string_view>

#include "totem/tensor.hpp"

namespace totem {

/// xoshiro256++ seeded through splitmix64. Integer state only, so streams are
/// reproducible bit-for-bit for a given seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller (pairs cached).
    double gaussian();

private:
    std::uint64_t s_[4];
    double cached_ = 0.0;
    bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Stable sub-seed from (master seed, purpose string). FNV-1a over the purpose,
/// mixed with the master through splitmix64.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose);

/// Glorot/Bengio uniform initialization: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

}  // namespace totem
