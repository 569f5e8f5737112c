#pragma once

#include <cmath>
#include <string_view>

#include "mohawk/common.hpp"

namespace mohawk {

// Counter-based generator with labeled substreams. Draw i of stream k is a
// pure function of (k, i), so independently split streams give identical
// values no matter in which order the program touches them.
class Rng {
public:
    explicit Rng(u64 seed) : key_(mix(seed, 0x6d6f6861776b2e31ull)), counter_(0) {}
    Rng(u64 key, u64 counter) : key_(key), counter_(counter) {}

    Rng split(u64 label) const { return Rng(mix(key_, label), 0); }
    Rng split(std::string_view label) const { return split(fnv1a(label)); }

    u64 next_u64() { return mix(key_, counter_++); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    i64 uniform_int(i64 n) {  // [0, n)
        check(n > 0, "Rng::uniform_int: n must be positive");
        return static_cast<i64>((static_cast<__uint128_t>(next_u64()) *
                                 static_cast<__uint128_t>(n)) >> 64);
    }

    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    u64 key() const { return key_; }
    u64 counter() const { return counter_; }

    static u64 fnv1a(std::string_view s) {
        u64 h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    static u64 splitmix(u64 z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }
    static u64 mix(u64 a, u64 b) {
        return splitmix(splitmix(a) ^ (b * 0xD1B54A32D192ED03ull) ^ 0x8CB92BA72F3D8DD7ull);
    }

    u64 key_;
    u64 counter_;
};

}  // namespace mohawk
