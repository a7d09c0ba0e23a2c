// Shared aliases, error types and the deterministic counter-based RNG used
// by every module. All numerics are 64-bit IEEE doubles; every random draw
// in the library goes through CounterRng so runs replay bit-exactly.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace omnidistill {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Counter-based stream: state is a pure function of (seed, stream, counter),
// so independent streams never interact and draws are reproducible no matter
// which order streams are created in.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed, uint64_t stream = 0)
        : base_(splitmix64(splitmix64(seed) ^ (0x6a09e667f3bcc909ull + stream))) {}

    uint64_t next_u64() { return splitmix64(base_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller; u clamped away from 0 so log stays finite.
        double u = next_double();
        double v = next_double();
        if (u < 0x1.0p-60) u = 0x1.0p-60;
        double r = std::sqrt(-2.0 * std::log(u));
        double theta = 2.0 * M_PI * v;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Unbiased draw in [0, n).
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw NumericError("CounterRng::next_below: n must be positive");
        const uint64_t reject = (0 - n) % n;  // 2^64 mod n
        for (;;) {
            uint64_t r = next_u64();
            if (r >= reject) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Uniform without replacement, order of selection preserved.
    std::vector<int> sample_without_replacement(int population, int n) {
        if (n > population) throw DimensionError("sample_without_replacement: n exceeds population");
        std::vector<int> idx(population);
        for (int i = 0; i < population; ++i) idx[i] = i;
        std::vector<int> out(n);
        for (int i = 0; i < n; ++i) {
            int j = i + static_cast<int>(next_below(static_cast<uint64_t>(population - i)));
            std::swap(idx[i], idx[j]);
            out[i] = idx[i];
        }
        return out;
    }

private:
    uint64_t base_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite entries");
}

}  // namespace omnidistill
