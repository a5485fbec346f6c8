#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace fedmerge {

// Deterministic counter-based generator ("splitmix64-counter"): the i-th output
// is the SplitMix64 finalizer applied to key + i*golden. Draws depend only on
// (key, draw index), so the stream is bit-identical on every platform, and
// child streams derived from the key alone are independent of how many draws
// the parent or any sibling has consumed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(finalize(seed ^ 0x9e3779b97f4a7c15ull)) {}

    std::uint64_t next_u64() {
        counter_ += 1;
        return finalize(key_ + counter_ * 0x9e3779b97f4a7c15ull);
    }

    // Uniform in [0, 1), 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller. Consumes exactly two uniforms per call
    // (no cached spare) so stream positions stay easy to reason about.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // Guard the log: map u1 = 0 to the smallest representable positive draw.
        if (u1 <= 0.0) { u1 = 0x1.0p-53; }
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Gamma(alpha, 1) via Marsaglia-Tsang squeeze, boosted for alpha < 1.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double u = uniform();
            return gamma(alpha + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) { continue; }
            v = v * v * v;
            const double u = uniform();
            const double x2 = x * x;
            if (u < 1.0 - 0.0331 * x2 * x2) { return d * v; }
            if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) { return d * v; }
        }
    }

    // Symmetric Dirichlet(alpha) over n components.
    std::vector<double> dirichlet(double alpha, std::size_t n) {
        std::vector<double> g(n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            g[i] = gamma(alpha);
            sum += g[i];
        }
        if (sum <= 0.0) {
            for (double& v : g) { v = 1.0 / static_cast<double>(n); }
            return g;
        }
        for (double& v : g) { v /= sum; }
        return g;
    }

    // Unbiased integer in [0, n) via masked rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) { return 0; }
        std::uint64_t mask = n - 1;
        mask |= mask >> 1;
        mask |= mask >> 2;
        mask |= mask >> 4;
        mask |= mask >> 8;
        mask |= mask >> 16;
        mask |= mask >> 32;
        for (;;) {
            const std::uint64_t v = next_u64() & mask;
            if (v < n) { return v; }
        }
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Child stream addressed by label. Derived from the parent key only, so the
    // result does not depend on the parent's draw position.
    Rng child(std::string_view label) const {
        return Rng::from_key(finalize(key_ ^ finalize(fnv1a(label) + 0x2545f4914f6cdd1dull)));
    }

    Rng child(std::uint64_t label) const {
        return Rng::from_key(finalize(key_ ^ finalize(label + 0x452821e638d01377ull)));
    }

    Rng child(std::string_view label, std::uint64_t index) const { return child(label).child(index); }

private:
    Rng() = default;

    static Rng from_key(std::uint64_t key) {
        Rng r;
        r.key_ = key;
        return r;
    }

    static std::uint64_t finalize(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace fedmerge
