#pragma once

// Permutation diagnostics over row-stochastic matrices and logit-evidence curves.

#include "ssmprobe/core.hpp"
#include "ssmprobe/pooling.hpp"
#include "ssmprobe/routing.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>

namespace ssmprobe {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr double kDefaultEdgeBand = 0.10;

struct PlanDiagnostics {
    std::size_t n = 0;
    double rank_coverage = 0.0;
    std::size_t unique_positions = 0;
    double norm_entropy = 0.0;
    double edge_mass = 0.0;
    double row_max_mean = 0.0;
    double row_max_p95 = 0.0;

    bool operator==(const PlanDiagnostics&) const = default;
};

/// Row argmax with ties resolved to the smallest column.
inline std::vector<std::size_t> row_argmax(const Matrix& p) {
    std::vector<std::size_t> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < p.cols(); ++j)
            if (p(i, j) > p(i, best)) best = j;
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    }
    return out;
}

/// Nearest-rank percentile, q in (0, 1].
inline double nearest_rank(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    rank = std::clamp<std::size_t>(rank, 1, v.size());
    return v[rank - 1];
}

inline std::size_t edge_band_width(std::size_t n, double frac) {
    return static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n) / 2.0));
}

inline PlanDiagnostics plan_diagnostics(const Matrix& p, double edge_band_frac = kDefaultEdgeBand) {
    if (p.rows() < 1 || p.rows() != p.cols()) throw Error("plan must be a nonempty square matrix");
    if (!(edge_band_frac >= 0.0 && edge_band_frac <= 1.0)) throw Error("edge_band_frac must be in [0,1]");
    const auto n = static_cast<std::size_t>(p.rows());
    const auto arg = row_argmax(p);

    std::vector<std::size_t> hist(n, 0);
    for (auto a : arg) ++hist[a];

    PlanDiagnostics d;
    d.n = n;
    for (auto h : hist) d.unique_positions += h > 0 ? 1 : 0;
    d.rank_coverage = static_cast<double>(d.unique_positions) / static_cast<double>(n);

    if (n > 1) {
        double h = 0.0;
        for (auto c : hist) {
            if (c == 0) continue;
            const double q = static_cast<double>(c) / static_cast<double>(n);
            h -= q * std::log(q);
        }
        // Rounding can push a perfect spread a few ulps past 1.
        d.norm_entropy = std::clamp(h / std::log(static_cast<double>(n)), 0.0, 1.0);
    }

    const auto band = edge_band_width(n, edge_band_frac);
    std::size_t edge = 0;
    for (auto a : arg)
        if (a < band || a + band >= n) ++edge;
    d.edge_mass = static_cast<double>(edge) / static_cast<double>(n);

    std::vector<double> row_max(n);
    for (std::size_t i = 0; i < n; ++i) row_max[i] = p.row(static_cast<Eigen::Index>(i)).maxCoeff();
    double s = 0.0;
    for (double v : row_max) s += v;
    d.row_max_mean = s / static_cast<double>(n);
    d.row_max_p95 = nearest_rank(row_max, 0.95);
    return d;
}

struct StochasticityReport {
    double row_err = 0.0;
    double col_err = 0.0;

    bool operator==(const StochasticityReport&) const = default;
};

inline StochasticityReport stochasticity_report(const Matrix& p) {
    const auto [r, c] = marginal_errors(p);
    return {r, c};
}

struct EvidenceCurve {
    std::vector<double> values;  // C(k), k = 1..N
    std::uint32_t class_index = 0;
    std::string ordering;  // "raster" or "routed"
    double gamma = 1.0;

    bool operator==(const EvidenceCurve&) const = default;
};

/// C(k) = gamma^(N-k) * (W_c . t_k) for tokens already in sequence order.
inline EvidenceCurve evidence_curve(const Classifier& clf, const Matrix& ordered_tokens, std::uint32_t c, double gamma,
                                    std::string ordering = "raster") {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error("gamma must be in (0, 1]");
    if (c >= clf.W.rows()) throw Error("class index out of range");
    if (ordered_tokens.cols() != clf.W.cols()) throw Error("token dimension does not match classifier");
    EvidenceCurve e;
    e.class_index = c;
    e.ordering = std::move(ordering);
    e.gamma = gamma;
    const auto n = ordered_tokens.rows();
    const Vector proj = ordered_tokens * clf.W.row(c).transpose();
    e.values.resize(static_cast<std::size_t>(n));
    for (Eigen::Index k = 0; k < n; ++k)
        e.values[static_cast<std::size_t>(k)] = std::pow(gamma, static_cast<double>(n - 1 - k)) * proj[k];
    return e;
}

/// Fraction of absolute evidence at positions k > N/2 (1-based); 0.5 without evidence.
inline double late_mass_statistic(const EvidenceCurve& e) {
    const std::size_t n = e.values.size();
    if (n < 2) throw Error("late mass needs N >= 2");
    double total = 0.0, late = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = std::abs(e.values[i]);
        total += a;
        if (2 * (i + 1) > n) late += a;
    }
    return total > 0.0 ? late / total : 0.5;
}

// ---------------------------------------------------------------------------
// Report emission

struct DiagnosticsReport {
    std::vector<PlanDiagnostics> plans;
    std::vector<EvidenceCurve> curves;
    std::vector<StochasticityReport> stochasticity;
};

inline nlohmann::json to_json(const PlanDiagnostics& d) {
    return {{"N", d.n},
            {"rank_coverage", d.rank_coverage},
            {"unique_positions", d.unique_positions},
            {"norm_entropy", d.norm_entropy},
            {"edge_mass", d.edge_mass},
            {"row_max_mean", d.row_max_mean},
            {"row_max_p95", d.row_max_p95}};
}

inline nlohmann::json to_json(const DiagnosticsReport& r) {
    nlohmann::json j;
    j["version"] = kReportSchemaVersion;
    j["plans"] = nlohmann::json::array();
    for (const auto& p : r.plans) j["plans"].push_back(to_json(p));
    j["curves"] = nlohmann::json::array();
    for (const auto& c : r.curves)
        j["curves"].push_back(
            {{"class", c.class_index}, {"ordering", c.ordering}, {"gamma", c.gamma}, {"values", c.values}});
    j["stochasticity"] = nlohmann::json::array();
    for (const auto& s : r.stochasticity) j["stochasticity"].push_back({{"row_err", s.row_err}, {"col_err", s.col_err}});
    return j;
}

inline DiagnosticsReport report_from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kReportSchemaVersion) throw Error("unsupported report schema version");
    DiagnosticsReport r;
    for (const auto& p : j.at("plans")) {
        PlanDiagnostics d;
        d.n = p.at("N").get<std::size_t>();
        d.rank_coverage = p.at("rank_coverage").get<double>();
        d.unique_positions = p.at("unique_positions").get<std::size_t>();
        d.norm_entropy = p.at("norm_entropy").get<double>();
        d.edge_mass = p.at("edge_mass").get<double>();
        d.row_max_mean = p.at("row_max_mean").get<double>();
        d.row_max_p95 = p.at("row_max_p95").get<double>();
        r.plans.push_back(d);
    }
    for (const auto& c : j.at("curves")) {
        EvidenceCurve e;
        e.class_index = c.at("class").get<std::uint32_t>();
        e.ordering = c.at("ordering").get<std::string>();
        e.gamma = c.at("gamma").get<double>();
        e.values = c.at("values").get<std::vector<double>>();
        r.curves.push_back(std::move(e));
    }
    for (const auto& s : j.at("stochasticity"))
        r.stochasticity.push_back({s.at("row_err").get<double>(), s.at("col_err").get<double>()});
    return r;
}

/// Writes report.json, plans.csv, curves.csv (all curves, long format) and
/// curve_<i>_<ordering>.csv per curve into `dir`. Returns the written paths.
inline std::vector<std::string> emit_report(const DiagnosticsReport& r, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<std::string> written;
    auto open = [&](const std::string& name) {
        const auto path = (fs::path(dir) / name).string();
        std::ofstream out(path);
        if (!out) throw Error("cannot open " + path + " for writing");
        out << std::setprecision(17);
        written.push_back(path);
        return out;
    };
    {
        auto out = open("report.json");
        out << to_json(r).dump(2) << '\n';
    }
    {
        auto out = open("plans.csv");
        out << "plan,N,rank_coverage,unique_positions,norm_entropy,edge_mass,row_max_mean,row_max_p95\n";
        for (std::size_t i = 0; i < r.plans.size(); ++i) {
            const auto& d = r.plans[i];
            out << i << ',' << d.n << ',' << d.rank_coverage << ',' << d.unique_positions << ',' << d.norm_entropy
                << ',' << d.edge_mass << ',' << d.row_max_mean << ',' << d.row_max_p95 << '\n';
        }
    }
    {
        auto out = open("curves.csv");
        out << "curve,ordering,class,gamma,position,contribution\n";
        for (std::size_t i = 0; i < r.curves.size(); ++i) {
            const auto& c = r.curves[i];
            for (std::size_t k = 0; k < c.values.size(); ++k)
                out << i << ',' << c.ordering << ',' << c.class_index << ',' << c.gamma << ',' << k + 1 << ','
                    << c.values[k] << '\n';
        }
    }
    for (std::size_t i = 0; i < r.curves.size(); ++i) {
        const auto& c = r.curves[i];
        auto out = open("curve_" + std::to_string(i) + "_" + c.ordering + ".csv");
        out << "position,contribution\n";
        for (std::size_t k = 0; k < c.values.size(); ++k) out << k + 1 << ',' << c.values[k] << '\n';
    }
    return written;
}

}  // namespace ssmprobe
