#pragma once
// Deterministic RNG used across the project. We avoid std::<distribution>
// types because their output is implementation-defined; every sampled value
// here is reproducible bit-for-bit on any platform.
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace gals {

// splitmix64 stream generator.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n), n > 0
    int uniform_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    // Standard normal via Box-Muller (polar form avoided: trig form has no
    // rejection loop, so the consumed stream length is fixed).
    double normal();

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; has_spare_ = false; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a
uint64_t hash64(std::string_view s);

// Sub-seed for a named component so one root seed drives the whole pipeline.
uint64_t derive_seed(std::string_view component, uint64_t root, uint64_t index = 0);

}  // namespace gals
