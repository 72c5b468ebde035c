#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace caplab {

// All randomness in the library flows through this generator. std::random
// distributions are implementation-defined, so sampling is spelled out here
// to keep every run reproducible across standard libraries and platforms.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// 64-bit FNV-1a, used both for stream derivation and content fingerprints.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline std::uint64_t hash_str(std::string_view s, std::uint64_t seed = 0) {
    return fnv1a(s.data(), s.size(), 0xcbf29ce484222325ULL ^ seed);
}

// xoshiro256++ core, seeded through splitmix64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl_(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl_(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n). n = 0 or 1 consumes no state so that
    // degenerate draws (e.g. a one-caption pool) cannot perturb a stream.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller without a cached spare: one value per call, fixed draw count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; used to give every (example, epoch, ...) its
    // own reproducible sequence regardless of evaluation order.
    Rng derive(std::uint64_t stream_id) const {
        std::uint64_t mix = state_[0];
        mix = hash_combine(mix, state_[3]);
        mix = hash_combine(mix, stream_id);
        return Rng(mix);
    }

private:
    static std::uint64_t rotl_(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
};

// Named stream derivation from a root seed, e.g. derive_stream(seed, "epoch", 7).
inline Rng derive_stream(std::uint64_t seed, std::string_view tag,
                         std::uint64_t index = 0) {
    return Rng(hash_combine(hash_combine(seed, hash_str(tag)), index));
}

} // namespace caplab
