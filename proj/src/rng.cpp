#include "gals/rng.hpp"

#include <cmath>

namespace gals {

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0,1] so log() is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

uint64_t hash64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t derive_seed(std::string_view component, uint64_t root, uint64_t index) {
    Rng mix(hash64(component) ^ (root * 0x9e3779b97f4a7c15ull) ^ (index + 1));
    return mix.next_u64();
}

}  // namespace gals
