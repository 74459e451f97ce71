#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mgnet {

// Contract violations throw; message should name the offending value.
[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// Single seeded RNG drives everything (init, shuffles, augmentation, synth data)
// so a fixed seed reproduces a run bit for bit.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen_);
    }
    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
    }
    bool bernoulli(double p = 0.5) {
        return std::bernoulli_distribution(p)(gen_);
    }
    uint64_t next_seed() { return gen_(); }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace mgnet
