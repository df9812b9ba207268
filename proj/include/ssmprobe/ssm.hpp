#pragma once

// SISO S4 readout shared across channels: HiPPO-LegS initialisation, bilinear
// discretisation, dense recurrence and exact reverse-mode gradients.

#include "ssmprobe/core.hpp"
#include "ssmprobe/scan_orders.hpp"

#include <Eigen/Eigenvalues>

#include <optional>
#include <vector>

namespace ssmprobe {

inline constexpr double kMinStep = 1e-3;
inline constexpr double kMaxStep = 1e-1;
inline constexpr double kInitStep = 5e-2;

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

/// Effective step size: softplus(raw) clamped to [kMinStep, kMaxStep].
inline double step_from_raw(double raw) { return std::clamp(softplus(raw), kMinStep, kMaxStep); }

/// d(step)/d(raw); zero where the clamp is active.
inline double step_derivative(double raw) {
    const double sp = softplus(raw);
    if (sp < kMinStep || sp > kMaxStep) return 0.0;
    return sigmoid(raw);
}

/// HiPPO-LegS: A[n][k] = -sqrt(2n+1)sqrt(2k+1) for n > k, -(n+1) on the
/// diagonal, 0 above it (0-based indices).
inline Matrix hippo_legs(int n_state) {
    if (n_state < 1) throw Error("n_state must be >= 1");
    Matrix a = Matrix::Zero(n_state, n_state);
    for (int n = 0; n < n_state; ++n) {
        for (int k = 0; k < n; ++k) a(n, k) = -std::sqrt(2.0 * n + 1.0) * std::sqrt(2.0 * k + 1.0);
        a(n, n) = -(n + 1.0);
    }
    return a;
}

struct S4Params {
    Matrix A;
    Vector B;
    Vector C;
    double D = 0.0;
    double delta_raw = inverse_softplus(kInitStep);
    bool a_trainable = true;

    int n_state() const { return static_cast<int>(B.size()); }
    double step() const { return step_from_raw(delta_raw); }
};

/// HiPPO A, B and C ~ N(0, 1/n_state), D = 0, softplus(delta_raw) = 5e-2.
inline S4Params init_s4(int n_state, Rng& rng, bool a_trainable = true) {
    S4Params p;
    p.A = hippo_legs(n_state);
    const double s = 1.0 / std::sqrt(static_cast<double>(n_state));
    p.B = random_normal(rng, n_state, s);
    p.C = random_normal(rng, n_state, s);
    p.D = 0.0;
    p.delta_raw = inverse_softplus(kInitStep);
    p.a_trainable = a_trainable;
    return p;
}

struct DiscretizedSystem {
    Matrix A_bar;
    Vector B_bar;
    Matrix M_inv;  // (I - step/2 * A)^-1
    double step = 0.0;
};

inline DiscretizedSystem discretize(const S4Params& p) {
    const auto n = p.A.rows();
    if (p.A.cols() != n || p.B.size() != n || p.C.size() != n) throw Error("S4 parameter shapes disagree");
    const double dt = p.step();
    const Matrix eye = Matrix::Identity(n, n);
    const Matrix m = eye - 0.5 * dt * p.A;
    Eigen::PartialPivLU<Matrix> lu(m);
    if (!(std::abs(lu.determinant()) > 0.0) || lu.rcond() < 1e-14)
        throw Error("singular matrix in bilinear discretization");
    DiscretizedSystem sys;
    sys.step = dt;
    sys.M_inv = lu.inverse();
    sys.A_bar = lu.solve(Matrix(eye + 0.5 * dt * p.A));
    sys.B_bar = lu.solve(Vector(dt * p.B));
    return sys;
}

inline double spectral_radius(const Matrix& m) {
    if (m.rows() == 0) return 0.0;
    Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(m), false);
    if (es.info() != Eigen::Success) throw Error("eigenvalue solver failed");
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline std::uint64_t system_fingerprint(const S4Params& p, const DiscretizedSystem& sys) {
    auto h = fingerprint(sys.A_bar);
    h = fingerprint(sys.B_bar, h);
    h = fingerprint(p.C, h);
    return fingerprint(p.D, h);
}

struct S4Tape {
    Matrix tokens;  // N x d, the ordered input sequence
    Matrix states;  // (N+1)*n_state x d; block k holds h_k, h_0 = 0
    int n_state = 0;
    std::uint64_t system_id = 0;

    auto state(Eigen::Index k) const { return states.middleRows(k * n_state, n_state); }
};

struct S4HeadOutput {
    Vector z_out;              // d
    std::optional<Matrix> Z;   // N x d, when requested
    S4Tape tape;
};

/// Per channel c with h_0 = 0: h_k = A_bar h_{k-1} + B_bar u_k[c],
/// y_k = C.h_k + D u_k[c]; z_out[c] = y_N.
inline S4HeadOutput s4_forward(const S4Params& p, const DiscretizedSystem& sys, const Matrix& tokens,
                               bool materialize = false) {
    const auto n_tok = tokens.rows();
    const auto d = tokens.cols();
    const int n = p.n_state();
    if (n_tok < 1) throw Error("s4_forward requires at least one token");
    if (!tokens.allFinite()) throw Error("non-finite input to s4_forward");

    S4HeadOutput out;
    out.tape.n_state = n;
    out.tape.tokens = tokens;
    out.tape.states.resize((n_tok + 1) * n, d);
    out.tape.states.topRows(n).setZero();
    if (materialize) out.Z = Matrix(n_tok, d);
    for (Eigen::Index k = 1; k <= n_tok; ++k) {
        auto next = out.tape.states.middleRows(k * n, n);
        next.noalias() = sys.A_bar * out.tape.states.middleRows((k - 1) * n, n);
        next.noalias() += sys.B_bar * tokens.row(k - 1);
        if (materialize) out.Z->row(k - 1) = p.C.transpose() * next + p.D * tokens.row(k - 1);
    }
    out.z_out = (p.C.transpose() * out.tape.state(n_tok)).transpose() + p.D * tokens.row(n_tok - 1).transpose();
    out.tape.system_id = system_fingerprint(p, sys);
    return out;
}

inline S4HeadOutput s4_forward(const S4Params& p, const Matrix& tokens, bool materialize = false) {
    return s4_forward(p, discretize(p), tokens, materialize);
}

/// Gradients with respect to the discrete system (A_bar, B_bar) plus C and D.
struct DiscreteGrad {
    Matrix A_bar;
    Vector B_bar;
    Vector C;
    double D = 0.0;

    explicit DiscreteGrad(int n = 0) : A_bar(Matrix::Zero(n, n)), B_bar(Vector::Zero(n)), C(Vector::Zero(n)) {}
};

/// Backpropagates grad_z through the recurrence, accumulating into `acc`.
/// Returns d(loss)/d(tokens).
inline Matrix s4_backward_discrete(const S4Params& p, const DiscretizedSystem& sys, const S4Tape& tape,
                                   const Vector& grad_z, DiscreteGrad& acc) {
    if (tape.system_id != system_fingerprint(p, sys)) throw Error("stale tape");
    const auto n_tok = tape.tokens.rows();
    const auto d = tape.tokens.cols();
    if (grad_z.size() != d) throw Error("grad_z dimension mismatch");

    Matrix grad_tokens = Matrix::Zero(n_tok, d);
    acc.C.noalias() += tape.state(n_tok) * grad_z;
    acc.D += grad_z.dot(tape.tokens.row(n_tok - 1));
    grad_tokens.row(n_tok - 1) += p.D * grad_z.transpose();

    Matrix g = p.C * grad_z.transpose();  // d loss / d h_N, n x d
    Matrix g_prev(g.rows(), g.cols());
    for (Eigen::Index k = n_tok; k >= 1; --k) {
        acc.A_bar.noalias() += g * tape.state(k - 1).transpose();
        acc.B_bar.noalias() += g * tape.tokens.row(k - 1).transpose();
        grad_tokens.row(k - 1).noalias() += sys.B_bar.transpose() * g;
        if (k > 1) {
            g_prev.noalias() = sys.A_bar.transpose() * g;
            g.swap(g_prev);
        }
    }
    return grad_tokens;
}

struct S4Grad {
    Matrix A;  // zero when A is frozen
    Vector B;
    Vector C;
    double D = 0.0;
    double delta_raw = 0.0;
};

/// Chain rule through A_bar = M^-1 (I + s/2 A), B_bar = M^-1 s B with
/// M = I - s/2 A, using d(M^-1) = -M^-1 dM M^-1.
inline S4Grad discretization_backward(const S4Params& p, const DiscretizedSystem& sys, const DiscreteGrad& g) {
    const auto n = p.A.rows();
    const double s = sys.step;
    const Matrix x = sys.M_inv.transpose() * g.A_bar;
    const Vector y = sys.M_inv.transpose() * g.B_bar;
    const Matrix sens = x * (Matrix::Identity(n, n) + sys.A_bar).transpose() + y * sys.B_bar.transpose();

    S4Grad out;
    out.A = p.a_trainable ? Matrix(0.5 * s * sens) : Matrix(Matrix::Zero(n, n));
    out.B = s * y;
    out.C = g.C;
    out.D = g.D;
    const double d_step = 0.5 * (sens.array() * p.A.array()).sum() + y.dot(p.B);
    out.delta_raw = d_step * step_derivative(p.delta_raw);
    return out;
}

struct S4Backward {
    S4Grad params;
    Matrix tokens;
};

inline S4Backward s4_backward(const S4Params& p, const DiscretizedSystem& sys, const S4Tape& tape,
                              const Vector& grad_z) {
    DiscreteGrad acc(p.n_state());
    S4Backward out;
    out.tokens = s4_backward_discrete(p, sys, tape, grad_z, acc);
    out.params = discretization_backward(p, sys, acc);
    return out;
}

/// Mean over directions of s4_forward(params[i], apply_order(order_i, tokens)).z_out.
inline Vector multi_direction_readout(const std::vector<S4Params>& params, const ScanFamily& family,
                                      const Matrix& tokens) {
    if (params.size() != family.size() || params.empty())
        throw Error("multi_direction_readout: " + std::to_string(params.size()) + " parameter sets for " +
                    std::to_string(family.size()) + " directions");
    Vector acc = Vector::Zero(tokens.cols());
    for (std::size_t i = 0; i < params.size(); ++i)
        acc += s4_forward(params[i], apply_order(family.orders[i], tokens)).z_out;
    return acc / static_cast<double>(params.size());
}

}  // namespace ssmprobe
