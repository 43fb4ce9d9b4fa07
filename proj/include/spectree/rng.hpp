#pragma once

#include <cstdint>
#include <vector>

#include "spectree/matrix.hpp"

namespace spectree {

// Self-contained uniform stream (splitmix-style counter mixing). Gives
// bit-identical values for a seed on every platform and standard library,
// which the weight-init determinism contract relies on.
class UniformStream {
public:
    explicit UniformStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double next(double lo, double hi) {
        const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;  // [0, 1)
        return lo + (hi - lo) * u;
    }

    // Uniform integer in [0, n) by rejection-free scaling (n << 2^53).
    std::int64_t next_index(std::int64_t n) {
        return static_cast<std::int64_t>(next(0.0, 1.0) * static_cast<double>(n));
    }

    void fill(Matrix& m, double lo, double hi) {
        for (double& v : m.data) v = next(lo, hi);
    }
    void fill(std::vector<double>& v, double lo, double hi) {
        for (double& x : v) x = next(lo, hi);
    }

private:
    std::uint64_t state_;
};

}  // namespace spectree
