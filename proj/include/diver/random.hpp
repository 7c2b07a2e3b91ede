#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace diver {

// Seeded RNG used everywhere randomness is needed. std::mt19937_64 plus the
// explicit distributions below give identical streams across runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    int uniform_int(int lo, int hi) {  // inclusive
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine_);
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = uniform_int(0, i);
            std::swap(p[i], p[j]);
        }
        return p;
    }

    // k distinct indices from 0..n-1, uniform without replacement.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> p = permutation(n);
        p.resize(k);
        return p;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace diver
