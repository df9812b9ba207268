#pragma once

// Probe heads. Every head owns a flat f64 parameter vector described by a
// ParamLayout, computes logits for one sample and the exact gradient of the
// mean cross-entropy over a batch.

#include "ssmprobe/core.hpp"
#include "ssmprobe/feature_store.hpp"
#include "ssmprobe/optim.hpp"
#include "ssmprobe/pooling.hpp"
#include "ssmprobe/routing.hpp"
#include "ssmprobe/scan_orders.hpp"
#include "ssmprobe/ssm.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ssmprobe {

enum class HeadKind {
    GAP,
    CLS,
    AttnPool,
    ContentWeighted,
    TopK,
    S4Scan,
    S4Sinkhorn,
    S4RandomFixed,
    S4RandomDynamic,
    S4SinkhornScramble,
};

inline std::string to_string(HeadKind k) {
    switch (k) {
        case HeadKind::GAP: return "gap";
        case HeadKind::CLS: return "cls";
        case HeadKind::AttnPool: return "attn_pool";
        case HeadKind::ContentWeighted: return "content_weighted";
        case HeadKind::TopK: return "topk";
        case HeadKind::S4Scan: return "s4_scan";
        case HeadKind::S4Sinkhorn: return "s4_sinkhorn";
        case HeadKind::S4RandomFixed: return "s4_random_fixed";
        case HeadKind::S4RandomDynamic: return "s4_random_dynamic";
        case HeadKind::S4SinkhornScramble: return "s4_sinkhorn_scramble";
    }
    return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
    for (auto k : {HeadKind::GAP, HeadKind::CLS, HeadKind::AttnPool, HeadKind::ContentWeighted, HeadKind::TopK,
                   HeadKind::S4Scan, HeadKind::S4Sinkhorn, HeadKind::S4RandomFixed, HeadKind::S4RandomDynamic,
                   HeadKind::S4SinkhornScramble})
        if (to_string(k) == s) return k;
    throw Error("unknown head kind '" + s + "'");
}

inline bool is_s4(HeadKind k) {
    return k == HeadKind::S4Scan || k == HeadKind::S4Sinkhorn || k == HeadKind::S4RandomFixed ||
           k == HeadKind::S4RandomDynamic || k == HeadKind::S4SinkhornScramble;
}

inline bool is_sinkhorn(HeadKind k) { return k == HeadKind::S4Sinkhorn || k == HeadKind::S4SinkhornScramble; }

struct HeadSpec {
    std::string name;
    HeadKind kind = HeadKind::GAP;
    ScanFamilyKind family = ScanFamilyKind::Raster;  // S4Scan only
    int n_state = 16;
    bool a_trainable = true;
    bool shared_directions = false;  // one S4 parameter set for all 4 directions
    std::size_t top_k = 16;
    SinkhornConfig sinkhorn;
};

struct Geometry {
    std::uint32_t grid_h = 1;
    std::uint32_t grid_w = 1;
    std::uint32_t d = 1;
    std::uint32_t num_classes = 1;

    std::size_t num_tokens() const { return std::size_t{grid_h} * grid_w; }
    static Geometry of(const FeatureSet& s) { return {s.grid_h, s.grid_w, s.d, s.num_classes}; }
    bool operator==(const Geometry&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter layout

struct ParamBlock {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t offset = 0;
    bool trainable = true;

    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

class ParamLayout {
public:
    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols, bool trainable = true) {
        blocks_.push_back({std::move(name), rows, cols, size_, trainable});
        size_ += blocks_.back().size();
        return blocks_.back().offset;
    }
    const ParamBlock& find(const std::string& name) const {
        for (const auto& b : blocks_)
            if (b.name == name) return b;
        throw Error("no parameter block '" + name + "'");
    }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::size_t size() const { return size_; }

    std::size_t trainable_size() const {
        std::size_t n = 0;
        for (const auto& b : blocks_)
            if (b.trainable) n += b.size();
        return n;
    }
    std::vector<char> trainable_mask() const {
        std::vector<char> mask(size_, 0);
        for (const auto& b : blocks_)
            std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), b.trainable ? 1 : 0);
        return mask;
    }

private:
    std::vector<ParamBlock> blocks_;
    std::size_t size_ = 0;
};

inline std::size_t s4_direction_count(const HeadSpec& spec) {
    if (spec.kind != HeadKind::S4Scan) return 1;
    return (spec.family == ScanFamilyKind::Raster || spec.family == ScanFamilyKind::RandomFixed) ? 1 : 4;
}

inline std::size_t s4_param_sets(const HeadSpec& spec) {
    return spec.shared_directions ? 1 : s4_direction_count(spec);
}

inline ParamLayout make_layout(const HeadSpec& spec, const Geometry& geo) {
    ParamLayout l;
    const Eigen::Index d = geo.d, c = geo.num_classes;
    l.add("classifier.W", c, d);
    l.add("classifier.b", c, 1);
    switch (spec.kind) {
        case HeadKind::AttnPool: l.add("query", d, 1); break;
        case HeadKind::ContentWeighted:
        case HeadKind::TopK: l.add("scorer", d, 1); break;
        default: break;
    }
    if (is_sinkhorn(spec.kind)) l.add("scorer", d, 1);
    if (is_s4(spec.kind)) {
        const int n = spec.n_state;
        if (n < 1) throw Error("n_state must be >= 1");
        for (std::size_t i = 0; i < s4_param_sets(spec); ++i) {
            const std::string p = "s4." + std::to_string(i) + ".";
            l.add(p + "A", n, n, spec.a_trainable);
            l.add(p + "B", n, 1);
            l.add(p + "C", n, 1);
            l.add(p + "D", 1, 1);
            l.add(p + "delta_raw", 1, 1);
        }
    }
    return l;
}

/// Learnable parameters of the head including its classifier.
inline std::size_t count_params(const HeadSpec& spec, const Geometry& geo) {
    return make_layout(spec, geo).trainable_size();
}

// ---------------------------------------------------------------------------
// Samples in f64, converted once per dataset.

struct SampleRef {
    const Matrix& tokens;
    const Vector& cls;
    std::uint32_t label;
    std::uint64_t sample_id;
};

class ProbeData {
public:
    ProbeData() = default;
    explicit ProbeData(const FeatureSet& set) : geometry_(Geometry::of(set)) {
        tokens_.reserve(set.size());
        for (const auto& s : set.samples) {
            tokens_.push_back(s.patches());
            cls_.push_back(s.cls());
            labels_.push_back(s.label);
        }
    }
    std::size_t size() const { return tokens_.size(); }
    const Geometry& geometry() const { return geometry_; }
    SampleRef operator[](std::size_t i) const { return {tokens_[i], cls_[i], labels_[i], i}; }

private:
    Geometry geometry_;
    std::vector<Matrix> tokens_;
    std::vector<Vector> cls_;
    std::vector<std::uint32_t> labels_;
};

enum class RoutingMode { Normal, ScrambleAfterRouting, NoRouting, RandomPermBeforeS4 };

// ---------------------------------------------------------------------------

class Head {
public:
    Head(HeadSpec spec, Geometry geo, std::uint64_t seed)
        : spec_(std::move(spec)), geo_(geo), seed_(seed), layout_(make_layout(spec_, geo_)),
          params_(layout_.size(), 0.0) {}
    virtual ~Head() = default;

    Head(const Head&) = delete;
    Head& operator=(const Head&) = delete;

    const HeadSpec& spec() const { return spec_; }
    const Geometry& geometry() const { return geo_; }
    const ParamLayout& layout() const { return layout_; }
    std::uint64_t seed() const { return seed_; }

    std::span<const double> params() const { return params_; }
    /// Mutable view; call refresh() after writing.
    std::span<double> params_mut() { return params_; }
    void set_params(std::span<const double> p) {
        if (p.size() != params_.size()) throw Error("parameter vector size mismatch for head '" + spec_.name + "'");
        std::copy(p.begin(), p.end(), params_.begin());
        refresh();
    }

    /// Rebuilds derived caches (e.g. discretised systems) from params().
    virtual void refresh() = 0;
    virtual Vector logits(const SampleRef& s, std::uint64_t pass) const = 0;
    /// Mean loss over `batch`; writes d(mean loss)/d(params) into grad.
    virtual double batch_gradient(const ProbeData& data, std::span<const std::size_t> batch, std::uint64_t pass,
                                  std::span<double> grad) const = 0;
    virtual bool has_plan() const { return false; }

protected:
    Eigen::Map<const Matrix> block(const std::string& name) const {
        const auto& b = layout_.find(name);
        return {params_.data() + b.offset, b.rows, b.cols};
    }
    Eigen::Map<Matrix> block(const std::string& name) {
        const auto& b = layout_.find(name);
        return {params_.data() + b.offset, b.rows, b.cols};
    }
    Eigen::Map<Matrix> grad_block(std::span<double> grad, const std::string& name) const {
        const auto& b = layout_.find(name);
        return {grad.data() + b.offset, b.rows, b.cols};
    }
    Classifier read_classifier() const {
        return {Matrix(block("classifier.W")), Vector(block("classifier.b"))};
    }
    void write_classifier_grad(std::span<double> grad, const Matrix& gw, const Vector& gb) const {
        grad_block(grad, "classifier.W") = gw;
        grad_block(grad, "classifier.b") = gb;
    }

    HeadSpec spec_;
    Geometry geo_;
    std::uint64_t seed_;
    ParamLayout layout_;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// GAP / CLS / attention pool / content-weighted pool / top-k

class PoolHead final : public Head {
public:
    PoolHead(HeadSpec spec, Geometry geo, std::uint64_t seed) : Head(std::move(spec), geo, seed) {
        auto rng = make_rng(seed_, "init");
        const double s = 1.0 / std::sqrt(static_cast<double>(geo_.d));
        if (spec_.kind == HeadKind::AttnPool) block("query") = random_normal(rng, geo_.d, s);
        if (spec_.kind == HeadKind::ContentWeighted || spec_.kind == HeadKind::TopK)
            block("scorer") = random_normal(rng, geo_.d, s);
        if (spec_.kind == HeadKind::TopK && (spec_.top_k < 1 || spec_.top_k > geo_.num_tokens()))
            throw Error("top_k must be in [1, N]");
        refresh();
    }

    void refresh() override {
        clf_ = read_classifier();
        if (spec_.kind == HeadKind::AttnPool) vec_ = block("query");
        if (spec_.kind == HeadKind::ContentWeighted || spec_.kind == HeadKind::TopK) vec_ = block("scorer");
    }

    Vector pooled(const SampleRef& s) const {
        switch (spec_.kind) {
            case HeadKind::GAP: return gap(s.tokens);
            case HeadKind::CLS: return s.cls;
            case HeadKind::AttnPool: return attention_pool(vec_, s.tokens);
            case HeadKind::ContentWeighted: return content_weighted_pool(vec_, s.tokens);
            case HeadKind::TopK: return topk_pool(vec_, spec_.top_k, s.tokens);
            default: throw Error("not a pooling head");
        }
    }

    Vector logits(const SampleRef& s, std::uint64_t) const override { return clf_.logits(pooled(s)); }

    double batch_gradient(const ProbeData& data, std::span<const std::size_t> batch, std::uint64_t,
                          std::span<double> grad) const override {
        std::fill(grad.begin(), grad.end(), 0.0);
        const double inv = 1.0 / static_cast<double>(batch.size());
        Matrix gw = Matrix::Zero(clf_.W.rows(), clf_.W.cols());
        Vector gb = Vector::Zero(clf_.b.size());
        Vector gv = Vector::Zero(vec_.size());
        double loss = 0.0;
        const bool softmax_pooled = spec_.kind == HeadKind::AttnPool || spec_.kind == HeadKind::ContentWeighted;
        const double scale = spec_.kind == HeadKind::AttnPool ? attention_scale(geo_.d) : 1.0;
        for (auto i : batch) {
            const auto s = data[i];
            WeightedPool wp;
            Vector z;
            if (softmax_pooled) {
                wp = softmax_pool(vec_, s.tokens, scale);
                z = wp.output;
            } else {
                z = pooled(s);
            }
            auto ce = cross_entropy(clf_.logits(z), s.label);
            loss += ce.loss;
            ce.grad_logits *= inv;
            const auto cg = classify_backward(clf_, z, ce.grad_logits);
            gw += cg.W;
            gb += cg.b;
            if (softmax_pooled) gv += softmax_pool_backward(wp, s.tokens, cg.z, scale);
        }
        write_classifier_grad(grad, gw, gb);
        if (spec_.kind == HeadKind::AttnPool) grad_block(grad, "query") = gv;
        if (spec_.kind == HeadKind::ContentWeighted) grad_block(grad, "scorer") = gv;
        // Top-k selection is piecewise constant in the scorer: its gradient is zero.
        return loss * inv;
    }

private:
    Classifier clf_;
    Vector vec_;
};

// ---------------------------------------------------------------------------
// S4 heads: fixed scans, random permutations and Sinkhorn routing.

class S4Head final : public Head {
public:
    S4Head(HeadSpec spec, Geometry geo, std::uint64_t seed) : Head(std::move(spec), geo, seed) {
        auto rng = make_rng(seed_, "init");
        if (is_sinkhorn(spec_.kind))
            block("scorer") = random_normal(rng, geo_.d, 1.0 / std::sqrt(static_cast<double>(geo_.d)));
        for (std::size_t i = 0; i < s4_param_sets(spec_); ++i) write_s4(i, init_s4(spec_.n_state, rng, spec_.a_trainable));
        spec_.sinkhorn.validate();
        if (spec_.kind == HeadKind::S4Scan) {
            if (spec_.family == ScanFamilyKind::RandomDynamic)
                throw Error("use kind s4_random_dynamic for per-sample random orders");
            family_ = make_scan_family(spec_.family, geo_.grid_h, geo_.grid_w, seed_);
        } else if (spec_.kind == HeadKind::S4RandomFixed) {
            family_ = make_scan_family(ScanFamilyKind::RandomFixed, geo_.grid_h, geo_.grid_w, seed_);
        } else {
            family_ = raster_family(geo_.grid_h, geo_.grid_w);  // placeholder identity
        }
        refresh();
    }

    void refresh() override {
        clf_ = read_classifier();
        s4_.clear();
        sys_.clear();
        for (std::size_t i = 0; i < s4_param_sets(spec_); ++i) {
            s4_.push_back(read_s4(i));
            sys_.push_back(discretize(s4_.back()));
        }
        if (is_sinkhorn(spec_.kind)) scorer_.w = block("scorer");
    }

    bool has_plan() const override { return is_sinkhorn(spec_.kind); }

    const std::vector<S4Params>& s4_params() const { return s4_; }
    const std::vector<DiscretizedSystem>& systems() const { return sys_; }
    const Classifier& classifier() const { return clf_; }
    const Scorer& scorer() const { return scorer_; }
    const ScanFamily& family() const { return family_; }

    RouteResult route(const Matrix& tokens) const {
        if (!has_plan()) throw Error("head produces no transport plan");
        return route_sinkhorn(scorer_, spec_.sinkhorn, tokens);
    }

    /// Readout for the given sequence-preparation mode. Non-Normal modes are
    /// only meaningful for Sinkhorn heads and use `seed` for their permutations.
    Vector logits_with_mode(const SampleRef& s, RoutingMode mode, std::uint64_t seed, std::uint64_t pass = 0) const {
        if (mode == RoutingMode::Normal) return logits(s, pass);
        if (!has_plan()) throw Error("routing modes require a Sinkhorn head");
        const auto n = static_cast<std::size_t>(s.tokens.rows());
        Matrix seq;
        switch (mode) {
            case RoutingMode::ScrambleAfterRouting:
                seq = scramble_after_routing(route(s.tokens).reordered, seed, s.sample_id);
                break;
            case RoutingMode::NoRouting: seq = s.tokens; break;
            case RoutingMode::RandomPermBeforeS4:
                seq = apply_order(random_permutation(n, seed, RandomMode::Dynamic, s.sample_id, 0), s.tokens);
                break;
            default: break;
        }
        return clf_.logits(s4_forward(s4_[0], sys_[0], seq).z_out);
    }

    /// Ordered sequences fed to each direction for this sample.
    std::vector<Matrix> sequences(const SampleRef& s, std::uint64_t pass, RouteResult* route_out = nullptr) const {
        const auto n = static_cast<std::size_t>(s.tokens.rows());
        switch (spec_.kind) {
            case HeadKind::S4Scan:
            case HeadKind::S4RandomFixed: {
                std::vector<Matrix> out;
                for (const auto& o : family_.orders) out.push_back(apply_order(o, s.tokens));
                return out;
            }
            case HeadKind::S4RandomDynamic:
                return {apply_order(random_permutation(n, seed_, RandomMode::Dynamic, s.sample_id, pass), s.tokens)};
            case HeadKind::S4Sinkhorn:
            case HeadKind::S4SinkhornScramble: {
                RouteResult r = route(s.tokens);
                Matrix seq = r.reordered;
                if (spec_.kind == HeadKind::S4SinkhornScramble) seq = apply_order(scramble_for(s, pass), seq);
                if (route_out) *route_out = std::move(r);
                return {std::move(seq)};
            }
            default: throw Error("not an S4 head");
        }
    }

    Vector readout(const SampleRef& s, std::uint64_t pass) const {
        const auto seqs = sequences(s, pass);
        Vector z = Vector::Zero(geo_.d);
        for (std::size_t i = 0; i < seqs.size(); ++i) z += s4_forward(s4_[set_of(i)], sys_[set_of(i)], seqs[i]).z_out;
        return z / static_cast<double>(seqs.size());
    }

    Vector logits(const SampleRef& s, std::uint64_t pass) const override { return clf_.logits(readout(s, pass)); }

    double batch_gradient(const ProbeData& data, std::span<const std::size_t> batch, std::uint64_t pass,
                          std::span<double> grad) const override {
        std::fill(grad.begin(), grad.end(), 0.0);
        const double inv = 1.0 / static_cast<double>(batch.size());
        std::vector<DiscreteGrad> acc;
        for (const auto& p : s4_) acc.emplace_back(p.n_state());
        Matrix gw = Matrix::Zero(clf_.W.rows(), clf_.W.cols());
        Vector gb = Vector::Zero(clf_.b.size());
        Vector g_scorer = Vector::Zero(geo_.d);
        double loss = 0.0;
        const bool routed = has_plan();

        for (auto i : batch) {
            const auto s = data[i];
            RouteResult route_fwd;
            const auto seqs = sequences(s, pass, routed ? &route_fwd : nullptr);
            const double dir_scale = 1.0 / static_cast<double>(seqs.size());
            std::vector<S4HeadOutput> outs;
            outs.reserve(seqs.size());
            Vector z = Vector::Zero(geo_.d);
            for (std::size_t k = 0; k < seqs.size(); ++k) {
                outs.push_back(s4_forward(s4_[set_of(k)], sys_[set_of(k)], seqs[k]));
                z += outs.back().z_out;
            }
            z *= dir_scale;

            auto ce = cross_entropy(clf_.logits(z), s.label);
            loss += ce.loss;
            ce.grad_logits *= inv;
            const auto cg = classify_backward(clf_, z, ce.grad_logits);
            gw += cg.W;
            gb += cg.b;
            const Vector gz = cg.z * dir_scale;
            for (std::size_t k = 0; k < seqs.size(); ++k) {
                const auto set = set_of(k);
                Matrix g_seq = s4_backward_discrete(s4_[set], sys_[set], outs[k].tape, gz, acc[set]);
                if (routed) {
                    if (spec_.kind == HeadKind::S4SinkhornScramble)
                        g_seq = apply_order_adjoint(scramble_for(s, pass), g_seq);
                    g_scorer += route_backward(scorer_, route_fwd, g_seq).w;
                }
            }
        }

        write_classifier_grad(grad, gw, gb);
        if (routed) grad_block(grad, "scorer") = g_scorer;
        for (std::size_t k = 0; k < s4_.size(); ++k) {
            const auto g = discretization_backward(s4_[k], sys_[k], acc[k]);
            const std::string p = "s4." + std::to_string(k) + ".";
            grad_block(grad, p + "A") = g.A;
            grad_block(grad, p + "B") = g.B;
            grad_block(grad, p + "C") = g.C;
            grad_block(grad, p + "D")(0, 0) = g.D;
            grad_block(grad, p + "delta_raw")(0, 0) = g.delta_raw;
        }
        return loss * inv;
    }

private:
    std::size_t set_of(std::size_t direction) const { return spec_.shared_directions ? 0 : direction; }

    ScanOrder scramble_for(const SampleRef& s, std::uint64_t pass) const {
        return scramble_order(static_cast<std::size_t>(s.tokens.rows()), derive_seed(seed_, "train-scramble", {pass}),
                              s.sample_id);
    }

    S4Params read_s4(std::size_t i) const {
        const std::string p = "s4." + std::to_string(i) + ".";
        S4Params s;
        s.A = block(p + "A");
        s.B = block(p + "B");
        s.C = block(p + "C");
        s.D = block(p + "D")(0, 0);
        s.delta_raw = block(p + "delta_raw")(0, 0);
        s.a_trainable = spec_.a_trainable;
        return s;
    }

    void write_s4(std::size_t i, const S4Params& s) {
        const std::string p = "s4." + std::to_string(i) + ".";
        block(p + "A") = s.A;
        block(p + "B") = s.B;
        block(p + "C") = s.C;
        block(p + "D")(0, 0) = s.D;
        block(p + "delta_raw")(0, 0) = s.delta_raw;
    }

    Classifier clf_;
    Scorer scorer_;
    ScanFamily family_;
    std::vector<S4Params> s4_;
    std::vector<DiscretizedSystem> sys_;
};

inline std::unique_ptr<Head> make_head(const HeadSpec& spec, const Geometry& geo, std::uint64_t seed) {
    if (spec.name.empty()) throw Error("every head needs a name");
    if (is_s4(spec.kind)) return std::make_unique<S4Head>(spec, geo, seed);
    return std::make_unique<PoolHead>(spec, geo, seed);
}

inline double accuracy(const Head& head, const ProbeData& data, std::uint64_t pass) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto s = data[i];
        Eigen::Index arg = 0;
        head.logits(s, pass).maxCoeff(&arg);
        if (static_cast<std::uint32_t>(arg) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace ssmprobe
