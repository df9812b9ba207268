#pragma once

// Learned soft permutation: linear scorer -> standardisation -> 1D transport
// cost against evenly spaced positions -> unrolled Sinkhorn -> P^T T.
// Every stage has an explicit backward pass.

#include "ssmprobe/binary_io.hpp"
#include "ssmprobe/core.hpp"
#include "ssmprobe/scan_orders.hpp"

#include <vector>

namespace ssmprobe {

struct Scorer {
    Vector w;

    Vector score(const Matrix& tokens) const {
        if (tokens.cols() != w.size()) throw Error("scorer dimension mismatch");
        return tokens * w;
    }
};

struct SinkhornConfig {
    int iterations = 20;
    double tau = 0.1;
    double epsilon_std = 1e-6;

    void validate() const {
        if (iterations < 1) throw Error("Sinkhorn iterations must be >= 1");
        if (!(tau > 0.0)) throw Error("Sinkhorn temperature must be positive");
        if (!(epsilon_std > 0.0)) throw Error("standardisation epsilon must be positive");
    }
};

struct TransportPlan {
    Matrix P;
    double row_marginal_err = 0.0;
    double col_marginal_err = 0.0;
};

inline std::pair<double, double> marginal_errors(const Matrix& p) {
    const double row = p.rows() ? (p.rowwise().sum().array() - 1.0).abs().maxCoeff() : 0.0;
    const double col = p.cols() ? (p.colwise().sum().array() - 1.0).abs().maxCoeff() : 0.0;
    return {row, col};
}

// ---------------------------------------------------------------------------
// Standardisation

struct StandardizeTape {
    Vector centered;
    double sigma = 0.0;
    double denom = 1.0;
};

/// (s - mean) / (population std + eps). A single score maps to 0.
inline Vector standardize(const Vector& s, double eps, StandardizeTape* tape = nullptr) {
    if (s.size() == 0) throw Error("cannot standardise an empty score vector");
    const Vector z = s.array() - s.mean();
    const double sigma = std::sqrt(z.squaredNorm() / static_cast<double>(s.size()));
    const double denom = sigma + eps;
    if (tape) *tape = {z, sigma, denom};
    return z / denom;
}

inline Vector standardize_backward(const StandardizeTape& t, const Vector& g) {
    const auto n = static_cast<double>(g.size());
    Vector gz = g / t.denom;
    if (t.sigma > 0.0) {
        const double coupling = g.dot(t.centered) / (t.denom * t.denom * n * t.sigma);
        gz -= coupling * t.centered;
    }
    return gz.array() - gz.mean();
}

inline Vector score_and_standardize(const Scorer& scorer, const Matrix& tokens, double eps = 1e-6) {
    if (tokens.rows() < 1) throw Error("score_and_standardize requires N >= 1");
    return standardize(scorer.score(tokens), eps);
}

// ---------------------------------------------------------------------------
// Cost

inline double position(Eigen::Index j, Eigen::Index n) { return static_cast<double>(j) / static_cast<double>(n - 1); }

/// C[i][j] = (s_tilde[i] - j/(N-1))^2.
inline Matrix build_cost(const Vector& s_tilde) {
    const auto n = s_tilde.size();
    if (n < 2) throw Error("build_cost requires N >= 2; single tokens bypass routing");
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            const double diff = s_tilde[i] - position(j, n);
            c(i, j) = diff * diff;
        }
    return c;
}

inline Vector build_cost_backward(const Vector& s_tilde, const Matrix& grad_c) {
    const auto n = s_tilde.size();
    Vector g = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) g[i] += 2.0 * (s_tilde[i] - position(j, n)) * grad_c(i, j);
    return g;
}

// ---------------------------------------------------------------------------
// Sinkhorn

struct SinkhornTape {
    Matrix log_kernel;           // -C / tau
    std::vector<Vector> log_u;   // a^(1..K)
    std::vector<Vector> log_v;   // b^(0..K), b^(0) = 0
    double tau = 1.0;
};

namespace detail {

// -logsumexp over each row of (f + 1 b^T).
inline Vector neg_row_lse(const Matrix& f, const Vector& b) {
    Vector out(f.rows());
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        const auto row = (f.row(i).transpose() + b).eval();
        const double m = row.maxCoeff();
        out[i] = -(m + std::log((row.array() - m).exp().sum()));
    }
    return out;
}

// -logsumexp over each column of (f + a 1^T).
inline Vector neg_col_lse(const Matrix& f, const Vector& a) {
    const Matrix shifted = f.colwise() + a;
    const Eigen::RowVectorXd m = shifted.colwise().maxCoeff();
    const Eigen::RowVectorXd s = (shifted.rowwise() - m).array().exp().colwise().sum();
    return -(m.array() + s.array().log()).transpose();
}

// exp(f + a 1^T + 1 b^T)
inline Matrix scaled_kernel(const Matrix& f, const Vector& a, const Vector& b) {
    return ((f.colwise() + a).rowwise() + b.transpose()).array().exp().matrix();
}

}  // namespace detail

/// K rounds of u <- 1/(K v), v <- 1/(K^T u) starting from v = 1, run on log
/// potentials. The returned plan is diag(u) K diag(v) with the final column
/// normalisation applied exactly.
inline TransportPlan sinkhorn(const Matrix& cost, const SinkhornConfig& cfg, SinkhornTape* tape = nullptr) {
    cfg.validate();
    if (cost.rows() != cost.cols()) throw Error("Sinkhorn cost must be square");
    if (!cost.allFinite()) throw Error("non-finite cost matrix");
    const auto n = cost.rows();
    const Matrix f = -cost / cfg.tau;

    Vector b = Vector::Zero(n);
    if (tape) {
        tape->log_kernel = f;
        tape->tau = cfg.tau;
        tape->log_u.clear();
        tape->log_v.assign(1, b);
    }
    Vector a;
    for (int t = 0; t < cfg.iterations; ++t) {
        a = detail::neg_row_lse(f, b);
        b = detail::neg_col_lse(f, a);
        if (tape) {
            tape->log_u.push_back(a);
            tape->log_v.push_back(b);
        }
    }

    // Columns of exp(f + a) normalised directly: identical to exp(f + a + b)
    // but exact when all entries coincide.
    const Matrix shifted = f.colwise() + a;
    const Eigen::RowVectorXd m = shifted.colwise().maxCoeff();
    Matrix e = (shifted.rowwise() - m).array().exp().matrix();
    const Eigen::RowVectorXd colsum = e.colwise().sum();
    for (Eigen::Index j = 0; j < n; ++j) e.col(j) /= colsum[j];

    TransportPlan plan;
    plan.P = std::move(e);
    std::tie(plan.row_marginal_err, plan.col_marginal_err) = marginal_errors(plan.P);
    return plan;
}

/// Gradient of the loss with respect to the cost matrix, through every
/// unrolled iteration and the kernel exponential.
inline Matrix sinkhorn_backward(const SinkhornTape& tape, const Matrix& grad_p) {
    const auto n = tape.log_kernel.rows();
    const auto iters = tape.log_u.size();
    if (iters == 0 || tape.log_v.size() != iters + 1) throw Error("stale tape");
    if (grad_p.rows() != n || grad_p.cols() != n) throw Error("grad_P shape does not match tape");
    const Matrix& f = tape.log_kernel;

    const Matrix p = detail::scaled_kernel(f, tape.log_u.back(), tape.log_v.back());
    const Matrix r = grad_p.cwiseProduct(p);
    Matrix df = r;
    Vector ga = r.rowwise().sum();
    Vector gb = r.colwise().sum().transpose();

    for (std::size_t t = iters; t-- > 0;) {
        const Vector& a = tape.log_u[t];
        // b^(t+1) = -LSE_i(f + a): column-normalised weights.
        const Matrix q = detail::scaled_kernel(f, a, tape.log_v[t + 1]);
        df.noalias() -= q * gb.asDiagonal();
        ga.noalias() -= q * gb;
        // a^(t+1) = -LSE_j(f + b^(t)): row-normalised weights.
        const Matrix q2 = detail::scaled_kernel(f, a, tape.log_v[t]);
        df.noalias() -= ga.asDiagonal() * q2;
        gb.noalias() = -(q2.transpose() * ga);
        ga.setZero();
    }
    return -df / tape.tau;
}

// ---------------------------------------------------------------------------
// Reordering

/// Output = P^T tokens.
inline Matrix soft_reorder(const Matrix& p, const Matrix& tokens) {
    if (p.rows() != tokens.rows() || p.cols() != p.rows()) throw Error("soft_reorder shape mismatch");
    return p.transpose() * tokens;
}

inline Matrix soft_reorder(const TransportPlan& plan, const Matrix& tokens) { return soft_reorder(plan.P, tokens); }

inline Matrix permutation_matrix(const ScanOrder& order) {
    const auto n = static_cast<Eigen::Index>(order.size());
    Matrix p = Matrix::Zero(n, n);
    for (Eigen::Index k = 0; k < n; ++k) p(static_cast<Eigen::Index>(order.indices[k]), k) = 1.0;
    return p;
}

struct RouteTape {
    Matrix tokens;
    StandardizeTape standardize;
    Vector s_tilde;
    SinkhornTape sinkhorn;
    bool bypass = false;
};

struct RouteResult {
    Matrix reordered;
    TransportPlan plan;
    RouteTape tape;
};

/// score -> standardise -> cost -> Sinkhorn -> P^T T. Single-token inputs pass through.
inline RouteResult route_sinkhorn(const Scorer& scorer, const SinkhornConfig& cfg, const Matrix& tokens) {
    if (!tokens.allFinite()) throw Error("non-finite tokens in route_sinkhorn");
    RouteResult out;
    out.tape.tokens = tokens;
    if (tokens.rows() == 1) {
        out.tape.bypass = true;
        out.reordered = tokens;
        out.plan.P = Matrix::Ones(1, 1);
        return out;
    }
    out.tape.s_tilde = standardize(scorer.score(tokens), cfg.epsilon_std, &out.tape.standardize);
    out.plan = sinkhorn(build_cost(out.tape.s_tilde), cfg, &out.tape.sinkhorn);
    out.reordered = soft_reorder(out.plan.P, tokens);
    return out;
}

struct RouteGrad {
    Vector w;
    Matrix tokens;
};

inline RouteGrad route_backward(const Scorer& scorer, const RouteResult& fwd, const Matrix& grad_reordered) {
    const auto& tape = fwd.tape;
    RouteGrad g;
    if (tape.bypass) {
        g.w = Vector::Zero(scorer.w.size());
        g.tokens = grad_reordered;
        return g;
    }
    const Matrix& t = tape.tokens;
    const Matrix grad_p = t * grad_reordered.transpose();
    g.tokens = fwd.plan.P * grad_reordered;
    const Matrix grad_c = sinkhorn_backward(tape.sinkhorn, grad_p);
    const Vector grad_st = build_cost_backward(tape.s_tilde, grad_c);
    const Vector grad_s = standardize_backward(tape.standardize, grad_st);
    g.w = t.transpose() * grad_s;
    g.tokens.noalias() += grad_s * scorer.w.transpose();
    return g;
}

/// Applies a fresh seeded permutation to an already-routed sequence.
inline ScanOrder scramble_order(std::size_t n, std::uint64_t seed, std::uint64_t sample_id = 0) {
    ScanOrder o;
    o.indices = fisher_yates(n, derive_seed(seed, "scramble", {sample_id}));
    o.family = ScanFamilyKind::RandomDynamic;
    return o;
}

inline Matrix scramble_after_routing(const Matrix& reordered, std::uint64_t seed, std::uint64_t sample_id = 0) {
    return apply_order(scramble_order(static_cast<std::size_t>(reordered.rows()), seed, sample_id), reordered);
}

// ---------------------------------------------------------------------------
// Plan export: "SSPL" | u32 version=1 | u32 N | u32 count | count * N*N f32 row-major

inline constexpr std::uint32_t kPlanFormatVersion = 1;

inline void write_plans(const std::string& path, const std::vector<Matrix>& plans) {
    const auto n = plans.empty() ? 0 : plans.front().rows();
    io::Writer w;
    w.bytes("SSPL", 4);
    w.u32(kPlanFormatVersion);
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(static_cast<std::uint32_t>(plans.size()));
    for (const auto& p : plans) {
        if (p.rows() != n || p.cols() != n) throw Error("all exported plans must share one N x N shape");
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) w.f32(static_cast<float>(p(i, j)));
    }
    w.save(path);
}

inline std::vector<Matrix> read_plans(const std::string& path) {
    auto r = io::Reader::from_file(path);
    char magic[4] = {};
    if (r.remaining() < 4) throw Error("bad magic");
    r.bytes(magic, 4);
    if (std::memcmp(magic, "SSPL", 4) != 0) throw Error("bad magic");
    if (r.u32() != kPlanFormatVersion) throw Error("version mismatch");
    const auto n = r.u32();
    const auto count = r.u32();
    if (r.remaining() != std::size_t{count} * n * n * 4) throw Error("truncated payload");
    std::vector<Matrix> plans(count, Matrix(n, n));
    for (auto& p : plans)
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) p(i, j) = r.f32();
    return plans;
}

}  // namespace ssmprobe
