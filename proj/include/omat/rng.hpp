#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace omat {

// 64-bit FNV-1a over a byte string. Used for label hashing and artifact digests.
std::uint64_t fnv1a64(std::string_view bytes);

// SplitMix64 finalizer. Bijective 64-bit mix.
std::uint64_t mix64(std::uint64_t x);

// Sub-seed derivation: one master seed reproduces an entire study.
//   seed_for(master, label) = mix64(master XOR fnv1a64(label))
std::uint64_t seed_for(std::uint64_t master_seed, std::string_view label);

// xoshiro256** seeded through SplitMix64, with Box-Muller normals.
// Fixed, documented algorithms so seeds are portable across implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform in [0, 1): (next_u64() >> 11) * 2^-53.
    double uniform();

    // Uniform integer in [0, n). Lemire multiply-shift (no rejection).
    std::uint64_t uniform_int(std::uint64_t n);

    // Standard normal via Box-Muller on (0,1] x [0,1) uniforms.
    double normal();

    std::vector<double> normal_vec(std::size_t n);

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

} // namespace omat
