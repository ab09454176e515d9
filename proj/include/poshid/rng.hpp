#pragma once

// Deterministic random number generation.
//
// GaussianRng is the single named generator used for weight init and input
// sampling: an std::mt19937_64 stream (bit-exact across conforming standard
// libraries) feeding a Box-Muller transform. std::normal_distribution is
// deliberately avoided because its output is implementation-defined.

#include <cmath>
#include <cstdint>
#include <random>

namespace poshid {

class GaussianRng {
  public:
    explicit GaussianRng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // modulo bias is < 2^-40 for n below a few billion; acceptable here
        return gen_() % n;
    }

    // Standard normal via Box-Muller on the mt19937_64 stream.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace poshid
