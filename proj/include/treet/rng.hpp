#pragma once

#include <cstdint>
#include <random>

namespace treet {

// splitmix64 finalizer, used to derive independent sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive the seed of sub-stream `id` from a master seed. Streams with
// distinct ids are statistically independent; the mapping is fixed so
// reruns reproduce the same streams.
inline std::uint64_t substream(std::uint64_t seed, std::uint64_t id) {
    return mix64(seed ^ mix64(id));
}

// Seeded generator wrapper. All randomness in the library flows through
// this type so that identical seeds give bit-identical runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }
    double uniform(double a = 0.0, double b = 1.0) {
        std::uniform_real_distribution<double> d(a, b);
        return d(engine_);
    }
    std::uint64_t integer(std::uint64_t upper) {  // in [0, upper)
        std::uniform_int_distribution<std::uint64_t> d(0, upper - 1);
        return d(engine_);
    }

    // Independent sub-stream keyed off the seed this Rng was built with.
    Rng split(std::uint64_t id) const { return Rng(substream(seed_, id)); }

    std::uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace treet
