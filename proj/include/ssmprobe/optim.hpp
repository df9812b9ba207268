#pragma once

#include "ssmprobe/core.hpp"

#include <numbers>
#include <span>
#include <vector>

namespace ssmprobe {

struct CrossEntropy {
    double loss = 0.0;
    Vector grad_logits;
};

/// -log softmax(logits)[label] via log-sum-exp; gradient softmax - onehot.
inline CrossEntropy cross_entropy(const Vector& logits, std::size_t label) {
    if (label >= static_cast<std::size_t>(logits.size())) throw Error("label out of range");
    if (!logits.allFinite()) throw Error("non-finite logits");
    const double m = logits.maxCoeff();
    const Vector e = (logits.array() - m).exp();
    const double sum = e.sum();
    CrossEntropy out;
    out.loss = m + std::log(sum) - logits[static_cast<Eigen::Index>(label)];
    out.grad_logits = e / sum;
    out.grad_logits[static_cast<Eigen::Index>(label)] -= 1.0;
    return out;
}

/// lr * 0.5 * (1 + cos(pi * t / T)); t is clamped to [0, T].
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class AdamW {
public:
    using Hyper = AdamWHyper;

    AdamW() = default;
    explicit AdamW(std::size_t n, Hyper h = {}) : hyper_(h), m_(n, 0.0), v_(n, 0.0) {}

    std::size_t step_count() const { return t_; }
    const std::vector<double>& first_moment() const { return m_; }
    const std::vector<double>& second_moment() const { return v_; }

    /// Decoupled decay p <- p (1 - lr wd), then the bias-corrected Adam step.
    /// Entries with trainable[i] == 0 are left untouched.
    void step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay,
              std::span<const char> trainable = {}) {
        if (params.size() != m_.size() || grads.size() != m_.size()) throw Error("AdamW shape mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!trainable.empty() && !trainable[i]) continue;
            const double g = grads[i];
            m_[i] = hyper_.beta1 * m_[i] + (1.0 - hyper_.beta1) * g;
            v_[i] = hyper_.beta2 * v_[i] + (1.0 - hyper_.beta2) * g * g;
            const double m_hat = m_[i] / bc1;
            const double v_hat = v_[i] / bc2;
            params[i] *= 1.0 - lr * weight_decay;
            params[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper_.epsilon);
        }
    }

private:
    Hyper hyper_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace ssmprobe
