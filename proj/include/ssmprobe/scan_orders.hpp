#pragma once

// Fixed traversal families over a grid_h x grid_w patch grid, plus seeded
// random permutations. Cell (r, c) has raster index r * grid_w + c.
//
// Within every 4-direction family, direction ids are
//   0: first sweep, 1: reverse of 0, 2: second sweep, 3: reverse of 2.

#include "ssmprobe/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace ssmprobe {

enum class ScanFamilyKind { Raster, VMamba, Diagonal, Snake, RandomFixed, RandomDynamic };

inline std::string to_string(ScanFamilyKind k) {
    switch (k) {
        case ScanFamilyKind::Raster: return "raster";
        case ScanFamilyKind::VMamba: return "vmamba";
        case ScanFamilyKind::Diagonal: return "diagonal";
        case ScanFamilyKind::Snake: return "snake";
        case ScanFamilyKind::RandomFixed: return "random_fixed";
        case ScanFamilyKind::RandomDynamic: return "random_dynamic";
    }
    return "?";
}

inline ScanFamilyKind scan_family_from_string(const std::string& s) {
    for (auto k : {ScanFamilyKind::Raster, ScanFamilyKind::VMamba, ScanFamilyKind::Diagonal, ScanFamilyKind::Snake,
                   ScanFamilyKind::RandomFixed, ScanFamilyKind::RandomDynamic})
        if (to_string(k) == s) return k;
    throw Error("unknown scan family '" + s + "'");
}

struct ScanOrder {
    std::vector<std::size_t> indices;
    ScanFamilyKind family = ScanFamilyKind::Raster;
    int direction_id = 0;

    std::size_t size() const { return indices.size(); }
    bool operator==(const ScanOrder&) const = default;
};

struct ScanFamily {
    std::vector<ScanOrder> orders;
    std::size_t size() const { return orders.size(); }
};

inline bool is_bijection(const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
        if (sorted[i] != i) return false;
    return true;
}

namespace detail {

inline void check_grid(std::size_t h, std::size_t w) {
    if (h == 0 || w == 0) throw Error("grid dimensions must be >= 1");
}

inline ScanOrder reversed(const ScanOrder& o, int direction_id) {
    ScanOrder r = o;
    std::reverse(r.indices.begin(), r.indices.end());
    r.direction_id = direction_id;
    return r;
}

inline ScanFamily four_way(ScanOrder first, ScanOrder second) {
    first.direction_id = 0;
    second.direction_id = 2;
    ScanFamily f;
    f.orders = {first, reversed(first, 1), second, reversed(second, 3)};
    return f;
}

// Cells grouped by key(r, c) ascending, ascending row within a group.
template <typename Key>
ScanOrder grouped_sweep(std::size_t h, std::size_t w, Key key) {
    std::vector<std::size_t> idx(h * w);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto ka = key(a / w, a % w), kb = key(b / w, b % w);
        if (ka != kb) return ka < kb;
        return a / w < b / w;
    });
    return {std::move(idx), ScanFamilyKind::Diagonal, 0};
}

}  // namespace detail

inline ScanOrder raster(std::size_t grid_h, std::size_t grid_w) {
    detail::check_grid(grid_h, grid_w);
    ScanOrder o;
    o.indices.resize(grid_h * grid_w);
    std::iota(o.indices.begin(), o.indices.end(), std::size_t{0});
    return o;
}

inline ScanFamily raster_family(std::size_t grid_h, std::size_t grid_w) { return {{raster(grid_h, grid_w)}}; }

inline ScanFamily vmamba_family(std::size_t grid_h, std::size_t grid_w) {
    detail::check_grid(grid_h, grid_w);
    ScanOrder rows = raster(grid_h, grid_w);
    ScanOrder cols;
    for (std::size_t c = 0; c < grid_w; ++c)
        for (std::size_t r = 0; r < grid_h; ++r) cols.indices.push_back(r * grid_w + c);
    rows.family = cols.family = ScanFamilyKind::VMamba;
    return detail::four_way(rows, cols);
}

inline ScanFamily snake_family(std::size_t grid_h, std::size_t grid_w) {
    detail::check_grid(grid_h, grid_w);
    ScanOrder rows, cols;
    for (std::size_t r = 0; r < grid_h; ++r)
        for (std::size_t k = 0; k < grid_w; ++k) {
            const std::size_t c = (r % 2 == 0) ? k : grid_w - 1 - k;
            rows.indices.push_back(r * grid_w + c);
        }
    for (std::size_t c = 0; c < grid_w; ++c)
        for (std::size_t k = 0; k < grid_h; ++k) {
            const std::size_t r = (c % 2 == 0) ? k : grid_h - 1 - k;
            cols.indices.push_back(r * grid_w + c);
        }
    rows.family = cols.family = ScanFamilyKind::Snake;
    return detail::four_way(rows, cols);
}

/// Anti-diagonal sweep groups cells by r + c; the mirrored sweep groups by
/// r + (grid_w - 1 - c). Within a group cells are visited by ascending row.
inline ScanFamily diagonal_family(std::size_t grid_h, std::size_t grid_w) {
    detail::check_grid(grid_h, grid_w);
    auto anti = detail::grouped_sweep(grid_h, grid_w, [](std::size_t r, std::size_t c) { return r + c; });
    auto mirrored =
        detail::grouped_sweep(grid_h, grid_w, [grid_w](std::size_t r, std::size_t c) { return r + (grid_w - 1 - c); });
    return detail::four_way(anti, mirrored);
}

/// Fisher-Yates permutation of 0..n-1 from a generator seeded with `seed`.
inline std::vector<std::size_t> fisher_yates(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

enum class RandomMode { Fixed, Dynamic };

/// Fixed mode ignores (sample_id, pass); dynamic mode draws a fresh
/// permutation for every (sample_id, pass) pair.
inline ScanOrder random_permutation(std::size_t n, std::uint64_t seed, RandomMode mode, std::uint64_t sample_id = 0,
                                    std::uint64_t pass = 0) {
    if (n == 0) throw Error("random_permutation requires n >= 1");
    ScanOrder o;
    if (mode == RandomMode::Fixed) {
        o.indices = fisher_yates(n, derive_seed(seed, "perm/fixed"));
        o.family = ScanFamilyKind::RandomFixed;
    } else {
        o.indices = fisher_yates(n, derive_seed(seed, "perm/dynamic", {sample_id, pass}));
        o.family = ScanFamilyKind::RandomDynamic;
    }
    return o;
}

inline ScanOrder inverse(const ScanOrder& o) {
    ScanOrder inv = o;
    for (std::size_t k = 0; k < o.indices.size(); ++k) inv.indices[o.indices[k]] = k;
    return inv;
}

/// Row k of the result is tokens[order.indices[k]].
inline Matrix apply_order(const ScanOrder& order, const Matrix& tokens) {
    if (order.size() != static_cast<std::size_t>(tokens.rows()))
        throw Error("order length " + std::to_string(order.size()) + " does not match " +
                    std::to_string(tokens.rows()) + " tokens");
    Matrix out(tokens.rows(), tokens.cols());
    for (std::size_t k = 0; k < order.size(); ++k)
        out.row(static_cast<Eigen::Index>(k)) = tokens.row(static_cast<Eigen::Index>(order.indices[k]));
    return out;
}

/// Adjoint of apply_order: scatters gradient rows back to source positions.
inline Matrix apply_order_adjoint(const ScanOrder& order, const Matrix& grad) {
    Matrix out = Matrix::Zero(grad.rows(), grad.cols());
    for (std::size_t k = 0; k < order.size(); ++k)
        out.row(static_cast<Eigen::Index>(order.indices[k])) += grad.row(static_cast<Eigen::Index>(k));
    return out;
}

inline ScanFamily make_scan_family(ScanFamilyKind kind, std::size_t grid_h, std::size_t grid_w, std::uint64_t seed = 0) {
    switch (kind) {
        case ScanFamilyKind::Raster: return raster_family(grid_h, grid_w);
        case ScanFamilyKind::VMamba: return vmamba_family(grid_h, grid_w);
        case ScanFamilyKind::Diagonal: return diagonal_family(grid_h, grid_w);
        case ScanFamilyKind::Snake: return snake_family(grid_h, grid_w);
        case ScanFamilyKind::RandomFixed: return {{random_permutation(grid_h * grid_w, seed, RandomMode::Fixed)}};
        case ScanFamilyKind::RandomDynamic:
            throw Error("random_dynamic has no fixed family; draw orders per sample");
    }
    throw Error("unknown scan family");
}

inline nlohmann::json to_json(const ScanOrder& o) {
    return {{"family", to_string(o.family)}, {"direction_id", o.direction_id}, {"indices", o.indices}};
}

inline ScanOrder scan_order_from_json(const nlohmann::json& j) {
    ScanOrder o;
    o.family = scan_family_from_string(j.at("family").get<std::string>());
    o.direction_id = j.at("direction_id").get<int>();
    o.indices = j.at("indices").get<std::vector<std::size_t>>();
    if (!is_bijection(o.indices)) throw Error("scan order indices are not a permutation");
    return o;
}

}  // namespace ssmprobe
