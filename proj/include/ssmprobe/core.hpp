#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ssmprobe {

// Probe math runs in f64; token payloads are stored as f32 (see feature_store.hpp).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kVersion = "0.3.0";

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Key derivation for every random stream in the toolkit:
/// seed' = splitmix(splitmix(seed ^ fnv1a(tag)) ^ k0) ^ k1 ...
/// Streams with different (seed, tag, keys) are independent for practical purposes.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::initializer_list<std::uint64_t> keys = {}) {
    std::uint64_t h = splitmix64(seed ^ fnv1a(tag));
    for (std::uint64_t k : keys) h = splitmix64(h ^ k);
    return h;
}

inline Rng make_rng(std::uint64_t seed, std::string_view tag,
                    std::initializer_list<std::uint64_t> keys = {}) {
    return Rng(derive_seed(seed, tag, keys));
}

inline Vector random_normal(Rng& rng, Eigen::Index n, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

/// Hash of the raw bytes of a dense block; used to detect stale tapes.
template <typename Derived>
std::uint64_t fingerprint(const Eigen::DenseBase<Derived>& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
        }
    }
    return h;
}

inline std::uint64_t fingerprint(double v, std::uint64_t h) {
    return splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
}

}  // namespace ssmprobe
