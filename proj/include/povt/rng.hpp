#pragma once

#include <cstdint>
#include <random>

namespace povt {

// Deterministic random stream. All randomness in the project flows through
// this wrapper so that a seed pins every output bit-exactly: the generator is
// std::mt19937_64 (whose sequence the standard specifies) and the float /
// gaussian constructions are our own rather than implementation-defined
// library distributions.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller, one spare cached.
    double normal();
    double normal(double mu, double sigma);

    // Uniform integer in [0, n). n must be positive.
    int randint(int n);

    // Derive an independent stream; (seed, stream) pairs map to distinct
    // generators via splitmix64 so parallel consumers never share state.
    Rng child(uint64_t stream) const;

private:
    std::mt19937_64 gen_;
    uint64_t seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 mix; used for seed derivation and checksums of small keys.
uint64_t mix64(uint64_t x);

} // namespace povt
