#ifndef CAVLAB_RNG_HPP
#define CAVLAB_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace cavlab {

// splitmix64 stream. Distributions are implemented here rather than taken
// from <random> so that sequences are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    std::size_t below(std::size_t n);      // [0, n)
    bool bernoulli(double p);
    double normal();                       // N(0, 1), Box-Muller

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

/// Seed that is a pure function of a master seed and cell coordinates.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> coords);

/// Fisher-Yates with Rng::below.
void shuffle(std::vector<std::size_t>& items, Rng& rng);

}  // namespace cavlab

#endif  // CAVLAB_RNG_HPP
