#pragma once

#include <cmath>
#include <cstdint>

namespace dwiseg {

// Counter-based generator built on SplitMix64 finalizers. Every draw is a
// pure function of (seed, stream, counter), so per-voxel parallel generation
// is scheduling-independent and byte-identical across platforms.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : base_(mix(mix(seed + 0x9E3779B97F4A7C15ULL) ^ stream)) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t bits_at(std::uint64_t counter) const { return mix(base_ ^ counter); }

    // Uniform in [0, 1).
    double uniform_at(std::uint64_t counter) const {
        return static_cast<double>(bits_at(counter) >> 11) * 0x1.0p-53;
    }

    // Independent standard-normal pair from one counter (Box-Muller).
    void normal_pair_at(std::uint64_t counter, double& z0, double& z1) const {
        // u0 in (0, 1] keeps the log finite.
        const double u0 = 1.0 - uniform_at(counter * 2);
        const double u1 = uniform_at(counter * 2 + 1);
        const double r = std::sqrt(-2.0 * std::log(u0));
        const double a = 6.283185307179586476925286766559 * u1;
        z0 = r * std::cos(a);
        z1 = r * std::sin(a);
    }

    double normal_at(std::uint64_t counter) const {
        double z0, z1;
        normal_pair_at(counter, z0, z1);
        return z0;
    }

    // Sequential convenience drawing from an internal counter.
    std::uint64_t next_bits() { return bits_at(counter_++); }
    double next_uniform() { return uniform_at(counter_++); }
    double next_normal() { return normal_at(counter_++); }

    // Uniform integer in [0, n) via the 128-bit multiply reduction.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_bits()) * n) >> 64);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = next_below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t base_;
    std::uint64_t counter_ = 0;
};

}  // namespace dwiseg
