#include "povt/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace povt {

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng::Rng(uint64_t seed) : gen_(seed), seed_(seed) {}

uint64_t Rng::next_u64() {
    has_spare_ = false; // interleaving normal/uniform stays reproducible
    return gen_();
}

double Rng::uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform(); // (0, 1], log is finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::normal(double mu, double sigma) {
    return mu + sigma * normal();
}

int Rng::randint(int n) {
    if (n <= 0) throw std::invalid_argument("randint: n must be positive");
    // rejection sampling keeps the distribution exactly uniform
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x = gen_();
    while (x >= limit) x = gen_();
    has_spare_ = false;
    return static_cast<int>(x % un);
}

Rng Rng::child(uint64_t stream) const {
    return Rng(mix64(seed_ ^ mix64(stream + 1)));
}

} // namespace povt
