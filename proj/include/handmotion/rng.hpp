#pragma once

#include <cstdint>
#include <random>

namespace handmotion {

// splitmix64 finalizer; used to derive independent stream seeds from a
// master seed so that consuming one stream never perturbs another.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : engine_(mix_seed(seed, stream)) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal(double mean, double stddev) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    // uniform integer in [lo, hi] inclusive
    std::int64_t randint(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    bool bernoulli(double p) {
        return std::bernoulli_distribution(p)(engine_);
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace handmotion
