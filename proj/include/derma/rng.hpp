#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace derma {

/// Deterministic random source. std::mt19937_64 output is pinned by the
/// standard, but the standard *distributions* are not, so every draw here
/// goes through fixed integer arithmetic instead. Identical seeds produce
/// bit-identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1), 53 bits.
    double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [0, 1), 24 bits.
    float uniform_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform_float(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);

    /// Standard normal via Box-Muller.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Derive an independent stream seed (splitmix64 finalizer over seed ^ stream tag).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace derma
