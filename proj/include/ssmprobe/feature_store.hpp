#pragma once

// Frozen-backbone token features: on-disk format, synthetic generation and
// seeded batch iteration.
//
// File layout (little-endian):
//   "SSMP" | u32 version=1 | u32 grid_h | u32 grid_w | u32 d | u32 num_classes | u32 sample_count
//   per sample: d f32 CLS values, N*d f32 patch values (row-major), u32 label

#include "ssmprobe/binary_io.hpp"
#include "ssmprobe/core.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace ssmprobe {

struct FeatureSample {
    MatrixF patch_tokens;  // N x d
    VectorF cls_token;     // d
    std::uint32_t label = 0;

    Matrix patches() const { return patch_tokens.cast<double>(); }
    Vector cls() const { return cls_token.cast<double>(); }

    bool operator==(const FeatureSample& o) const {
        return label == o.label && patch_tokens.rows() == o.patch_tokens.rows() &&
               patch_tokens.cols() == o.patch_tokens.cols() && cls_token.size() == o.cls_token.size() &&
               patch_tokens == o.patch_tokens && cls_token == o.cls_token;
    }
};

struct FeatureSet {
    std::vector<FeatureSample> samples;
    std::uint32_t grid_h = 1;
    std::uint32_t grid_w = 1;
    std::uint32_t d = 1;
    std::uint32_t num_classes = 1;
    std::string split_tag = "train";

    std::size_t num_tokens() const { return std::size_t{grid_h} * grid_w; }
    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    // split_tag is not part of the on-disk format.
    bool same_payload(const FeatureSet& o) const {
        return grid_h == o.grid_h && grid_w == o.grid_w && d == o.d && num_classes == o.num_classes &&
               samples == o.samples;
    }
};

inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr char kFeatureMagic[4] = {'S', 'S', 'M', 'P'};

/// Throws Error describing the first violated invariant.
inline void validate(const FeatureSet& set) {
    if (set.grid_h == 0 || set.grid_w == 0) throw Error("grid dimensions must be positive");
    if (set.d == 0) throw Error("embedding dimension must be positive");
    if (set.num_classes == 0) throw Error("num_classes must be positive");
    const auto n = static_cast<Eigen::Index>(set.num_tokens());
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        const auto& s = set.samples[i];
        if (s.patch_tokens.rows() != n || s.patch_tokens.cols() != set.d)
            throw Error("sample " + std::to_string(i) + ": patch token shape does not match header");
        if (s.cls_token.size() != set.d) throw Error("sample " + std::to_string(i) + ": CLS dimension mismatch");
        if (s.label >= set.num_classes) throw Error("sample " + std::to_string(i) + ": label out of range");
        if (!s.patch_tokens.allFinite() || !s.cls_token.allFinite()) throw Error("non-finite value");
    }
}

inline void write_features(const FeatureSet& set, const std::string& path) {
    validate(set);
    io::Writer w;
    w.bytes(kFeatureMagic, 4);
    w.u32(kFeatureFormatVersion);
    w.u32(set.grid_h);
    w.u32(set.grid_w);
    w.u32(set.d);
    w.u32(set.num_classes);
    w.u32(static_cast<std::uint32_t>(set.samples.size()));
    for (const auto& s : set.samples) {
        for (Eigen::Index j = 0; j < s.cls_token.size(); ++j) w.f32(s.cls_token[j]);
        for (Eigen::Index r = 0; r < s.patch_tokens.rows(); ++r)
            for (Eigen::Index c = 0; c < s.patch_tokens.cols(); ++c) w.f32(s.patch_tokens(r, c));
        w.u32(s.label);
    }
    w.save(path);
}

inline FeatureSet read_features(const std::string& path, std::string split_tag = "") {
    auto r = io::Reader::from_file(path);
    char magic[4] = {};
    if (r.remaining() < 4) throw Error("bad magic");
    r.bytes(magic, 4);
    if (std::memcmp(magic, kFeatureMagic, 4) != 0) throw Error("bad magic");
    const auto version = r.u32();
    if (version != kFeatureFormatVersion) throw Error("version mismatch: file has " + std::to_string(version));

    FeatureSet set;
    set.grid_h = r.u32();
    set.grid_w = r.u32();
    set.d = r.u32();
    set.num_classes = r.u32();
    const auto count = r.u32();
    set.split_tag = split_tag;
    if (set.grid_h == 0 || set.grid_w == 0 || set.d == 0 || set.num_classes == 0)
        throw Error("invalid header dimensions");

    const auto n = static_cast<Eigen::Index>(set.num_tokens());
    const std::size_t per_sample = (std::size_t{set.d} * (n + 1) + 1) * 4;
    if (r.remaining() < per_sample * count) throw Error("truncated payload");
    if (r.remaining() != per_sample * count) throw Error("payload size does not match header");

    set.samples.resize(count);
    for (auto& s : set.samples) {
        s.cls_token.resize(set.d);
        s.patch_tokens.resize(n, set.d);
        for (Eigen::Index j = 0; j < s.cls_token.size(); ++j) s.cls_token[j] = r.f32();
        for (Eigen::Index row = 0; row < n; ++row)
            for (Eigen::Index c = 0; c < s.patch_tokens.cols(); ++c) s.patch_tokens(row, c) = r.f32();
        s.label = r.u32();
    }
    validate(set);
    return set;
}

/// Desk-scale needle task: a few tokens per sample carry the class signal.
struct SynthSpec {
    std::size_t n_samples = 100;
    std::uint32_t grid_h = 4;
    std::uint32_t grid_w = 4;
    std::uint32_t d = 16;
    std::uint32_t num_classes = 10;
    std::uint32_t needle_count = 1;
    double signal_scale = 3.0;
    double noise_scale = 1.0;
    double distractor_rate = 0.0;
    // Probability that a needle lands in the central block of the grid instead
    // of a uniformly random cell. 0 gives uniformly random placement.
    double center_bias = 0.0;
    // Weight of the direction shared by all class means (a "foreground" axis).
    double shared_direction = 0.5;
    std::uint64_t seed = 0;
    std::string split_tag = "train";
};

inline void validate(const SynthSpec& spec) {
    const std::size_t n = std::size_t{spec.grid_h} * spec.grid_w;
    if (spec.grid_h == 0 || spec.grid_w == 0) throw Error("grid dimensions must be positive");
    if (spec.d == 0) throw Error("d must be positive");
    if (spec.num_classes == 0) throw Error("num_classes must be positive");
    if (spec.needle_count < 1 || spec.needle_count > n)
        throw Error("needle_count must be in [1, N] (N = " + std::to_string(n) + ")");
    if (!(spec.signal_scale >= 0) || !(spec.noise_scale >= 0)) throw Error("scales must be nonnegative");
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(spec.distractor_rate)) throw Error("distractor_rate must be in [0,1]");
    if (!in_unit(spec.center_bias)) throw Error("center_bias must be in [0,1]");
    if (!in_unit(spec.shared_direction)) throw Error("shared_direction must be in [0,1]");
}

/// Class mean vectors; depend only on (seed, d, num_classes, signal_scale,
/// shared_direction) so every split of one spec shares them.
inline std::vector<Vector> synthetic_class_means(const SynthSpec& spec) {
    auto rng = make_rng(spec.seed, "synth/class-means");
    const Vector shared = random_normal(rng, spec.d, 1.0).normalized();
    const double a = spec.shared_direction;
    std::vector<Vector> means;
    for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
        const Vector own = random_normal(rng, spec.d, 1.0).normalized();
        Vector m = a * shared + std::sqrt(1.0 - a * a) * own;
        means.push_back(spec.signal_scale * m.normalized());
    }
    return means;
}

inline std::vector<std::size_t> central_cells(std::uint32_t grid_h, std::uint32_t grid_w) {
    const std::uint32_t r0 = grid_h / 4, r1 = grid_h - grid_h / 4;
    const std::uint32_t c0 = grid_w / 4, c1 = grid_w - grid_w / 4;
    std::vector<std::size_t> cells;
    for (std::uint32_t r = r0; r < r1; ++r)
        for (std::uint32_t c = c0; c < c1; ++c) cells.push_back(std::size_t{r} * grid_w + c);
    return cells;
}

inline FeatureSet generate_synthetic(const SynthSpec& spec) {
    validate(spec);
    const auto means = synthetic_class_means(spec);
    const std::size_t n = std::size_t{spec.grid_h} * spec.grid_w;
    const auto center = central_cells(spec.grid_h, spec.grid_w);

    FeatureSet set;
    set.grid_h = spec.grid_h;
    set.grid_w = spec.grid_w;
    set.d = spec.d;
    set.num_classes = spec.num_classes;
    set.split_tag = spec.split_tag;
    set.samples.reserve(spec.n_samples);

    auto rng = make_rng(spec.seed, "synth/samples", {fnv1a(spec.split_tag)});
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const auto label = static_cast<std::uint32_t>(
            std::uniform_int_distribution<std::uint32_t>(0, spec.num_classes - 1)(rng));

        std::vector<char> taken(n, 0);
        for (std::uint32_t k = 0; k < spec.needle_count; ++k) {
            std::vector<std::size_t> pool;
            if (spec.center_bias > 0.0 && unit(rng) < spec.center_bias) {
                for (auto c : center)
                    if (!taken[c]) pool.push_back(c);
            }
            if (pool.empty()) {
                for (std::size_t c = 0; c < n; ++c)
                    if (!taken[c]) pool.push_back(c);
            }
            const auto pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
            taken[pool[pick]] = 1;
        }

        Matrix tokens(n, spec.d);
        for (std::size_t t = 0; t < n; ++t) {
            Vector row(spec.d);
            for (std::uint32_t j = 0; j < spec.d; ++j) row[j] = spec.noise_scale * noise(rng);
            if (taken[t]) {
                row += means[label];
            } else if (spec.num_classes > 1 && spec.distractor_rate > 0.0 && unit(rng) < spec.distractor_rate) {
                auto wrong = std::uniform_int_distribution<std::uint32_t>(0, spec.num_classes - 2)(rng);
                if (wrong >= label) ++wrong;
                row += means[wrong];
            }
            tokens.row(static_cast<Eigen::Index>(t)) = row.transpose();
        }

        FeatureSample s;
        s.patch_tokens = tokens.cast<float>();
        s.cls_token = s.patch_tokens.cast<double>().colwise().mean().transpose().cast<float>();
        s.label = label;
        set.samples.push_back(std::move(s));
    }
    return set;
}

using Batch = std::vector<std::size_t>;

/// Shuffled sample order for one epoch; a pure function of (shuffle_seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng(shuffle_seed, "batches", {epoch});
    for (std::size_t i = n; i > 1; --i) {
        const auto j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

/// Partition of one epoch into batches; the last batch may be short.
inline std::vector<Batch> iterate_batches(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed,
                                          std::uint64_t epoch) {
    if (batch_size == 0) throw Error("batch_size must be >= 1");
    const auto order = epoch_order(n, shuffle_seed, epoch);
    std::vector<Batch> batches;
    for (std::size_t i = 0; i < n; i += batch_size) {
        const auto end = std::min(n, i + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

inline std::vector<Batch> iterate_batches(const FeatureSet& set, std::size_t batch_size, std::uint64_t shuffle_seed,
                                          std::uint64_t epoch) {
    return iterate_batches(set.size(), batch_size, shuffle_seed, epoch);
}

}  // namespace ssmprobe
