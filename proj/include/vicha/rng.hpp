#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vicha {

// Deterministic random source. All draws are derived from raw mt19937_64
// output through fixed arithmetic, so a serialized engine state fully
// determines every future draw (std::normal_distribution would keep hidden
// state of its own, which breaks checkpoint resume).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n > 0
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        // modulo bias is < 2^-40 for any n this project uses
        return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
    }

    // standard normal, Box-Muller (cosine branch only; no cached state)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // normal(0, stddev) re-drawn until within 2 stddev
    double truncated_normal(double stddev) {
        for (;;) {
            double z = normal();
            if (std::abs(z) <= 2.0) return z * stddev;
        }
    }

    // k distinct indices drawn uniformly from [0, n), returned in ascending order
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + static_cast<int>(uniform_int(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    // seeded in-place Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw std::runtime_error("Rng::load_state: malformed state string");
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace vicha
