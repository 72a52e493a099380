#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pfi {

/// splitmix64 mixing step; used to derive substream seeds and hash strings.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    // FNV-1a folded through mix64 at the end.
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_string(const std::string& s) { return hash_bytes(s.data(), s.size()); }

/// Deterministic random stream. mt19937_64 state is fully specified by the
/// standard; the distributions below are hand-rolled so that output is
/// bit-stable across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_base_(seed) {}

    /// Named substream: disjoint deterministic stream derived from this
    /// stream's seed, a label and an index. Does not advance this stream.
    Rng substream(const std::string& name, std::uint64_t index = 0) const {
        std::uint64_t s = seed_base_;
        s = mix64(s ^ hash_string(name));
        s = mix64(s ^ index);
        return Rng(s);
    }

    std::uint64_t raw() { return engine_(); }

    /// Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
        // Rejection sampling on the top multiple of n; unbiased.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = engine_(); } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box–Muller (pair cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Exponential with given rate (mean 1/rate).
    double exponential(double rate) {
        if (rate <= 0.0) throw std::invalid_argument("exponential: rate must be positive");
        double u;
        do { u = uniform(); } while (u <= 0.0);
        return -std::log(u) / rate;
    }

    /// Index drawn proportionally to non-negative weights (need not sum to 1).
    std::size_t categorical(const Eigen::VectorXd& weights) {
        const double total = weights.sum();
        if (!(total > 0.0)) throw std::invalid_argument("categorical: weights must have positive sum");
        double u = uniform() * total;
        for (Eigen::Index i = 0; i < weights.size(); ++i) {
            u -= weights[i];
            if (u <= 0.0) return static_cast<std::size_t>(i);
        }
        return static_cast<std::size_t>(weights.size() - 1);  // fp roundoff fallthrough
    }

    Eigen::VectorXd normal_vector(Eigen::Index d) {
        Eigen::VectorXd v(d);
        for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
        return v;
    }

    /// Matrix of iid standard normals (rows x cols, column-major fill order).
    Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
        return m;
    }

    /// Random unit vector (uniform on the sphere).
    Eigen::VectorXd unit_vector(Eigen::Index d) {
        Eigen::VectorXd v = normal_vector(d);
        const double n = v.norm();
        return n > 0 ? Eigen::VectorXd(v / n) : unit_vector(d);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_base_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pfi
