#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace dstfuse {

/// Seeded random source. Every stochastic decision in the library draws from
/// an explicitly passed Rng so that a run is fully determined by its seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    bool bernoulli(double p) {
        return std::bernoulli_distribution(p)(engine_);
    }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    /// Derive an independent child stream. Consumes one draw from this stream.
    Rng split() { return Rng(engine_()); }

    std::mt19937_64& engine() { return engine_; }

    /// Engine state as text, for checkpointing.
    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& text) {
        std::istringstream is(text);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace dstfuse
