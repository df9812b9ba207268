#pragma once

// Permutation-invariant readouts and the linear classifier shared by all heads.

#include "ssmprobe/core.hpp"
#include "ssmprobe/feature_store.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace ssmprobe {

struct Classifier {
    Matrix W;  // num_classes x d
    Vector b;  // num_classes

    static Classifier zeros(Eigen::Index num_classes, Eigen::Index d) {
        return {Matrix::Zero(num_classes, d), Vector::Zero(num_classes)};
    }

    Vector logits(const Vector& z) const {
        if (z.size() != W.cols()) throw Error("classifier input has dimension " + std::to_string(z.size()) +
                                              ", expected " + std::to_string(W.cols()));
        return W * z + b;
    }
};

struct ClassifierGrad {
    Matrix W;
    Vector b;
    Vector z;
};

inline ClassifierGrad classify_backward(const Classifier& c, const Vector& z, const Vector& grad_logits) {
    return {grad_logits * z.transpose(), grad_logits, c.W.transpose() * grad_logits};
}

inline Vector classify(const Classifier& c, const Vector& z) { return c.logits(z); }

inline Vector gap(const Matrix& tokens) {
    if (tokens.rows() < 1) throw Error("gap requires N >= 1");
    return tokens.colwise().mean().transpose();
}

inline Vector cls_head(const FeatureSample& sample) { return sample.cls(); }

inline Vector softmax(const Vector& x) {
    const Vector e = (x.array() - x.maxCoeff()).exp();
    return e / e.sum();
}

struct WeightedPool {
    Vector output;
    Vector alpha;
};

/// Softmax(logit_scale * tokens * v) weighted average of token rows.
inline WeightedPool softmax_pool(const Vector& v, const Matrix& tokens, double logit_scale) {
    if (tokens.rows() < 1) throw Error("pooling requires N >= 1");
    if (v.size() != tokens.cols()) throw Error("pooling vector dimension mismatch");
    WeightedPool p;
    p.alpha = softmax(logit_scale * (tokens * v));
    p.output = tokens.transpose() * p.alpha;
    return p;
}

/// Gradient of the loss with respect to the pooling vector v.
inline Vector softmax_pool_backward(const WeightedPool& p, const Matrix& tokens, const Vector& grad_out,
                                    double logit_scale) {
    const Vector d_alpha = tokens * grad_out;
    const Vector d_logit = (p.alpha.array() * (d_alpha.array() - p.alpha.dot(d_alpha))).matrix();
    return logit_scale * (tokens.transpose() * d_logit);
}

inline double attention_scale(Eigen::Index d) { return 1.0 / std::sqrt(static_cast<double>(d)); }

/// Single learned query, scaled dot-product attention, no projections.
inline Vector attention_pool(const Vector& q, const Matrix& tokens) {
    return softmax_pool(q, tokens, attention_scale(tokens.cols())).output;
}

inline Vector content_weighted_pool(const Vector& w_score, const Matrix& tokens) {
    return softmax_pool(w_score, tokens, 1.0).output;
}

/// Indices of the k highest scores; ties resolved toward the lower index.
inline std::vector<std::size_t> topk_indices(const Vector& scores, std::size_t k) {
    const auto n = static_cast<std::size_t>(scores.size());
    if (k < 1 || k > n) throw Error("top-k requires 1 <= k <= N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)];
    });
    idx.resize(k);
    return idx;
}

inline Vector topk_pool(const Vector& w_score, std::size_t k, const Matrix& tokens) {
    if (w_score.size() != tokens.cols()) throw Error("scorer dimension mismatch");
    const auto idx = topk_indices(tokens * w_score, k);
    Vector out = Vector::Zero(tokens.cols());
    for (auto i : idx) out += tokens.row(static_cast<Eigen::Index>(i)).transpose();
    return out / static_cast<double>(k);
}

}  // namespace ssmprobe
