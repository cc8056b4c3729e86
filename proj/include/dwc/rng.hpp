#pragma once

#include <cstdint>
#include <cmath>

namespace dwc {

// 64-bit avalanche mix (splitmix64 finalizer).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based random stream. A draw is a pure function of (key, index),
// so parallel consumers never share mutable state and evaluation order
// cannot change the result. Sub-streams are derived by hashing, which keeps
// per-(layer, draw) noise reproducible regardless of scheduling.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed) : key_(mix64(seed ^ 0x6b43a9b5d2f8c137ull)) {}

    CounterRng stream(uint64_t id) const {
        CounterRng r = *this;
        r.key_ = mix64(key_ ^ mix64(id + 0x9e3779b97f4a7c15ull));
        return r;
    }

    uint64_t bits(uint64_t idx) const { return mix64(key_ ^ (idx * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull)); }

    // Uniform in (0, 1].
    double uniform(uint64_t idx) const {
        return static_cast<double>((bits(idx) >> 11) + 1) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller, consuming indices (2*idx, 2*idx+1).
    double normal(uint64_t idx) const {
        const double u1 = uniform(2 * idx);
        const double u2 = uniform(2 * idx + 1);
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    uint64_t key() const { return key_; }

private:
    uint64_t key_;
};

// Stable 64-bit hash of a string (FNV-1a), used to derive per-condition seeds.
inline uint64_t hash_name(const char* s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ull;
    return h;
}

} // namespace dwc
