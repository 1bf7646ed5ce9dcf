#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace frappe {

// splitmix64 finalizer; used to derive stream seeds so that forked
// generators are decorrelated from the parent and from each other.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG. The engine is std::mt19937_64, whose raw output
// sequence is pinned by the standard; the uniform/normal transforms are
// implemented here rather than with std::*_distribution because those are
// implementation-defined and would break cross-stdlib reproducibility.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive on both ends. Modulo bias is irrelevant at our range sizes;
    // determinism is what matters.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(eng_() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller. One spare value is cached, so a single
    // draw consumes either two or zero engine steps.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard the log: uniform() can return exactly 0.
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Child generator for an independent named stream. Forking does not
    // advance this generator, so the parent sequence is unaffected.
    Rng fork(uint64_t stream) const {
        return Rng(mix64(seed_state() ^ mix64(stream + 1)));
    }

  private:
    // A stable fingerprint of the current engine; good enough for stream
    // derivation (we only need fork determinism, not state reconstruction).
    uint64_t seed_state() const {
        std::mt19937_64 copy = eng_;
        return copy();
    }

    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace frappe
