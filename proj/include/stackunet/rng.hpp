#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace stackunet {

// Seedable counter-free RNG (splitmix64 core). Self-contained so that streams are
// reproducible across platforms and independent of libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    uint32_t uniform_int(uint32_t n) { return uint32_t(next_u64() % n); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    /// Derives an independent stream from a seed and a path of stream ids,
    /// e.g. derive(seed, {kAugmentStream, epoch, sample_index}).
    static Rng derive(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t s = seed;
        for (uint64_t p : path) {
            // one splitmix64 mixing round per path element
            s += 0x9e3779b97f4a7c15ULL * (p + 1);
            s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ULL;
            s = (s ^ (s >> 27)) * 0x94d049bb133111ebULL;
            s = s ^ (s >> 31);
        }
        return Rng(s);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Stream ids used to derive independent generators from one run seed.
namespace rng_stream {
constexpr uint64_t kInit = 1;      // weight initialization
constexpr uint64_t kShuffle = 2;   // per-epoch batch shuffling
constexpr uint64_t kAugment = 3;   // per-sample augmentation
constexpr uint64_t kSplit = 4;     // dataset splitting
constexpr uint64_t kSynth = 5;     // synthetic data rendering
}  // namespace rng_stream

}  // namespace stackunet
