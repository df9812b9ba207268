#pragma once

// Diagnostics driven by a trained head: per-sample plans, evidence curves
// under raster vs routed order, and their eval-set summaries.

#include "ssmprobe/diagnostics.hpp"
#include "ssmprobe/heads.hpp"

namespace ssmprobe {

/// Scalar decay proxy for evidence curves: spectral radius of the first
/// discretised system, capped at 1.
inline double default_gamma(const S4Head& head) {
    const double rho = spectral_radius(head.systems().front().A_bar);
    if (!(rho > 0.0)) throw Error("discretised system has zero spectral radius");
    return std::min(rho, 1.0);
}

inline std::vector<Matrix> collect_plans(const S4Head& head, const ProbeData& data, std::size_t max_samples = 0) {
    const std::size_t n = max_samples == 0 ? data.size() : std::min(max_samples, data.size());
    std::vector<Matrix> plans;
    plans.reserve(n);
    for (std::size_t i = 0; i < n; ++i) plans.push_back(head.route(data[i].tokens).plan.P);
    return plans;
}

/// Plan diagnostics of the element-wise mean plan.
inline PlanDiagnostics aggregate_plan_diagnostics(const std::vector<Matrix>& plans,
                                                  double edge_band_frac = kDefaultEdgeBand) {
    if (plans.empty()) throw Error("no plans to aggregate");
    Matrix mean = Matrix::Zero(plans.front().rows(), plans.front().cols());
    for (const auto& p : plans) {
        if (p.rows() != mean.rows() || p.cols() != mean.cols()) throw Error("plans differ in shape");
        mean += p;
    }
    return plan_diagnostics(mean / static_cast<double>(plans.size()), edge_band_frac);
}

struct EvidencePair {
    EvidenceCurve raster;
    EvidenceCurve routed;
};

inline EvidencePair evidence_pair(const S4Head& head, const Matrix& tokens, std::uint32_t c, double gamma) {
    return {evidence_curve(head.classifier(), tokens, c, gamma, "raster"),
            evidence_curve(head.classifier(), head.route(tokens).reordered, c, gamma, "routed")};
}

struct EvidenceSummary {
    std::uint32_t class_index = 0;
    double gamma = 1.0;
    std::size_t samples = 0;
    double late_mass_raster = 0.0;  // mean over samples
    double late_mass_routed = 0.0;
    EvidenceCurve mean_raster;      // position-wise mean of C(k)
    EvidenceCurve mean_routed;
};

/// Averages over eval samples of class c (all samples if none carry label c).
inline EvidenceSummary summarize_evidence(const S4Head& head, const ProbeData& data, std::uint32_t c, double gamma,
                                          std::size_t max_samples = 0) {
    if (c >= data.geometry().num_classes) throw Error("evidence class " + std::to_string(c) + " out of range");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data[i].label == c) idx.push_back(i);
    if (idx.empty())
        for (std::size_t i = 0; i < data.size(); ++i) idx.push_back(i);
    if (idx.empty()) throw Error("no samples to build evidence curves from");
    if (max_samples > 0 && idx.size() > max_samples) idx.resize(max_samples);

    EvidenceSummary s;
    s.class_index = c;
    s.gamma = gamma;
    s.samples = idx.size();
    const auto n = data.geometry().num_tokens();
    std::vector<double> raster(n, 0.0), routed(n, 0.0);
    for (auto i : idx) {
        const auto pair = evidence_pair(head, data[i].tokens, c, gamma);
        s.late_mass_raster += late_mass_statistic(pair.raster);
        s.late_mass_routed += late_mass_statistic(pair.routed);
        for (std::size_t k = 0; k < n; ++k) {
            raster[k] += pair.raster.values[k];
            routed[k] += pair.routed.values[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    s.late_mass_raster *= inv;
    s.late_mass_routed *= inv;
    for (std::size_t k = 0; k < n; ++k) {
        raster[k] *= inv;
        routed[k] *= inv;
    }
    s.mean_raster = {raster, c, "raster", gamma};
    s.mean_routed = {routed, c, "routed", gamma};
    return s;
}

}  // namespace ssmprobe
