#pragma once

#include <cmath>
#include <cstdint>

namespace unigen::core {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stateless mixing of several seed components into one stream key.
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t h = splitmix64(a);
    h = splitmix64(h ^ (b + 0x165667b19e3779f9ULL));
    h = splitmix64(h ^ (c + 0x27d4eb2f165667c5ULL));
    h = splitmix64(h ^ (d + 0x85ebca77c2b2ae63ULL));
    return h;
}

// Small deterministic generator (xorshift-style over splitmix state).
// Scalar-only so sequences are identical across builds and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(splitmix64(seed ^ 0x5851f42d4c957f2dULL)) {}

    uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller (one value per call; pair cached).
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double(), u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal truncated to |z| <= 2 sigma, the usual init scheme.
    double next_trunc_gaussian(double sigma) {
        double z = next_gaussian();
        while (std::fabs(z) > 2.0) z = next_gaussian();
        return z * sigma;
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) {
        state_ = s;
        have_spare_ = false;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace unigen::core
