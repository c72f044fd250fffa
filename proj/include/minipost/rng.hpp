#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace minipost {

// Stream derivation uses splitmix64 over a running hash so that every
// consumer of randomness owns an independent, reproducible stream keyed by
// (base seed, purpose tag, indices). Streams never share engine state.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(base);
    for (unsigned char c : tag) {
        h = splitmix64(h ^ c);
    }
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return h;
}

// Deterministic RNG. All distributions are implemented by hand on top of
// mt19937_64 so results are identical across standard libraries; the std::
// distribution adapters are implementation-defined and must not be used
// anywhere replay determinism matters.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53-bit resolution
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // avoid log(0)
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586477 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            return 0;
        }
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // index drawn from an explicit probability vector (assumed to sum to ~1;
    // trailing mass from rounding goes to the last index)
    int categorical(const Eigen::VectorXd& probs) {
        const double u = uniform();
        double cum = 0.0;
        for (Eigen::Index i = 0; i < probs.size(); ++i) {
            cum += probs[i];
            if (u < cum) {
                return static_cast<int>(i);
            }
        }
        return static_cast<int>(probs.size() - 1);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace minipost
