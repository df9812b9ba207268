#pragma once

// Joint training of isolated probe heads over frozen features, plus the sweep
// and scramble-ablation drivers.

#include "ssmprobe/heads.hpp"
#include "ssmprobe/optim.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace ssmprobe {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 256;
    std::size_t epochs = 10;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // steps; 0 evaluates once per epoch
    std::set<std::string> frozen_heads;

    void validate() const {
        if (!(lr > 0.0)) throw Error("lr must be positive");
        if (batch_size < 1) throw Error("batch_size must be >= 1");
        if (epochs < 1) throw Error("epochs must be >= 1");
        if (!(weight_decay >= 0.0)) throw Error("weight_decay must be nonnegative");
    }
};

struct MetricRecord {
    std::size_t step = 0;
    std::string head;
    std::string split;
    std::string metric;
    double value = 0.0;

    bool operator==(const MetricRecord&) const = default;
};

struct HeadRun {
    std::unique_ptr<Head> head;  // holds the best-eval parameters after training
    AdamW optimizer;
    std::vector<double> final_params;
    std::vector<double> best_params;
    double best_eval_acc = -1.0;
    std::size_t best_step = 0;
    std::vector<double> eval_history;
    bool frozen = false;
};

struct TrainRun {
    TrainConfig config;
    std::vector<HeadSpec> specs;
    std::vector<HeadRun> heads;
    std::vector<MetricRecord> metrics;
    std::map<std::string, std::uint64_t> seeds;  // purpose tag -> derived seed
    std::size_t total_steps = 0;

    const HeadRun& head(const std::string& name) const {
        for (const auto& h : heads)
            if (h.head->spec().name == name) return h;
        throw Error("no head named '" + name + "'");
    }
};

inline std::uint64_t head_init_seed(std::uint64_t seed, const std::string& head_name) {
    return derive_seed(seed, "head-init:" + head_name);
}

inline std::uint64_t shuffle_seed(std::uint64_t seed) { return derive_seed(seed, "shuffle"); }

/// Pass ids handed to heads at evaluation time never collide with training steps.
inline std::uint64_t eval_pass(std::size_t eval_index) { return (std::uint64_t{1} << 63) | eval_index; }

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

inline EvalResult evaluate(const Head& head, const ProbeData& data, std::uint64_t pass) {
    EvalResult r;
    if (data.size() == 0) return r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto s = data[i];
        const Vector logits = head.logits(s, pass);
        Eigen::Index arg = 0;
        logits.maxCoeff(&arg);
        if (static_cast<std::uint32_t>(arg) == s.label) ++correct;
        r.loss += cross_entropy(logits, s.label).loss;
    }
    const auto n = static_cast<double>(data.size());
    r.accuracy = static_cast<double>(correct) / n;
    r.loss /= n;
    return r;
}

/// One shuffled pass over batches per epoch; every head takes its own
/// gradient step on its own parameters with its own optimizer.
inline TrainRun train_joint(const std::vector<HeadSpec>& specs, const ProbeData& train, const ProbeData& eval,
                            const TrainConfig& cfg) {
    cfg.validate();
    if (specs.empty()) throw Error("no heads configured");
    if (train.size() == 0) throw Error("empty training set");
    if (eval.size() > 0 && !(eval.geometry() == train.geometry()))
        throw Error("train and eval feature geometry differ");
    std::set<std::string> names;
    for (const auto& s : specs)
        if (!names.insert(s.name).second) throw Error("duplicate head name '" + s.name + "'");
    for (const auto& f : cfg.frozen_heads)
        if (!names.count(f)) throw Error("frozen head '" + f + "' is not configured");

    TrainRun run;
    run.config = cfg;
    run.specs = specs;
    const auto geo = train.geometry();
    const auto shuffle = shuffle_seed(cfg.seed);
    run.seeds["shuffle"] = shuffle;
    for (const auto& s : specs) {
        const auto hs = head_init_seed(cfg.seed, s.name);
        run.seeds["head-init:" + s.name] = hs;
        HeadRun h;
        h.head = make_head(s, geo, hs);
        h.optimizer = AdamW(h.head->params().size());
        h.frozen = cfg.frozen_heads.count(s.name) > 0;
        h.best_params.assign(h.head->params().begin(), h.head->params().end());
        run.heads.push_back(std::move(h));
    }

    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    run.total_steps = steps_per_epoch * cfg.epochs;

    std::size_t eval_index = 0;
    auto do_eval = [&](std::size_t step) {
        if (eval.size() == 0) return;
        const auto pass = eval_pass(eval_index++);
        for (auto& h : run.heads) {
            const auto r = evaluate(*h.head, eval, pass);
            const auto& name = h.head->spec().name;
            run.metrics.push_back({step, name, "eval", "accuracy", r.accuracy});
            run.metrics.push_back({step, name, "eval", "loss", r.loss});
            h.eval_history.push_back(r.accuracy);
            if (r.accuracy > h.best_eval_acc) {
                h.best_eval_acc = r.accuracy;
                h.best_step = step;
                h.best_params.assign(h.head->params().begin(), h.head->params().end());
            }
        }
    };

    std::vector<std::vector<double>> grads(run.heads.size());
    std::vector<std::vector<char>> masks(run.heads.size());
    for (std::size_t i = 0; i < run.heads.size(); ++i) {
        grads[i].assign(run.heads[i].head->params().size(), 0.0);
        masks[i] = run.heads[i].head->layout().trainable_mask();
    }

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& batch : iterate_batches(train.size(), cfg.batch_size, shuffle, epoch)) {
            const double lr = cosine_lr(cfg.lr, step, run.total_steps);
            for (std::size_t i = 0; i < run.heads.size(); ++i) {
                auto& h = run.heads[i];
                const double loss = h.head->batch_gradient(train, batch, step, grads[i]);
                run.metrics.push_back({step, h.head->spec().name, "train", "loss", loss});
                if (h.frozen) continue;
                h.optimizer.step(h.head->params_mut(), grads[i], lr, cfg.weight_decay, masks[i]);
                h.head->refresh();
            }
            ++step;
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) do_eval(step);
        }
        if (cfg.eval_every == 0) do_eval(step);
    }
    if (cfg.eval_every > 0 && step % cfg.eval_every != 0) do_eval(step);

    for (auto& h : run.heads) {
        h.final_params.assign(h.head->params().begin(), h.head->params().end());
        if (eval.size() > 0) h.head->set_params(h.best_params);
    }
    return run;
}

// ---------------------------------------------------------------------------
// Output tables

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_metrics_csv(const std::vector<MetricRecord>& metrics, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "step,head,split,metric,value\n";
    for (const auto& m : metrics)
        out << m.step << ',' << m.head << ',' << m.split << ',' << m.metric << ',' << format_double(m.value) << '\n';
    if (!out) throw Error("write failed: " + path);
}

/// One row per evaluation event, one accuracy column per head.
inline void write_eval_wide_csv(const TrainRun& run, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "step";
    for (const auto& h : run.heads) out << ',' << h.head->spec().name;
    out << '\n';
    std::map<std::size_t, std::map<std::string, double>> rows;
    for (const auto& m : run.metrics)
        if (m.split == "eval" && m.metric == "accuracy") rows[m.step][m.head] = m.value;
    for (const auto& [step, vals] : rows) {
        out << step;
        for (const auto& h : run.heads) out << ',' << format_double(vals.at(h.head->spec().name));
        out << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

inline void write_summary_csv(const TrainRun& run, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "head,kind,params,best_eval_acc,best_step\n";
    for (const auto& h : run.heads) {
        const auto& s = h.head->spec();
        out << s.name << ',' << to_string(s.kind) << ',' << h.head->layout().trainable_size() << ','
            << format_double(h.best_eval_acc) << ',' << h.best_step << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
    std::vector<std::pair<std::string, std::string>> keys;  // e.g. {"K","20"}
    std::vector<std::uint64_t> seeds;
    std::vector<double> accuracies;

    double mean() const {
        if (accuracies.empty()) return 0.0;
        double s = 0.0;
        for (double a : accuracies) s += a;
        return s / static_cast<double>(accuracies.size());
    }
    /// Sample standard deviation (n - 1); 0 for a single seed.
    double stddev() const {
        if (accuracies.size() < 2) return 0.0;
        const double m = mean();
        double s = 0.0;
        for (double a : accuracies) s += (a - m) * (a - m);
        return std::sqrt(s / static_cast<double>(accuracies.size() - 1));
    }
};

inline double solo_best_accuracy(const HeadSpec& spec, const ProbeData& train, const ProbeData& eval,
                                 TrainConfig cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.frozen_heads.clear();
    return train_joint({spec}, train, eval, cfg).heads.front().best_eval_acc;
}

inline std::vector<SweepRow> sweep_sinkhorn_grid(const HeadSpec& base, const std::vector<int>& ks,
                                                 const std::vector<double>& taus,
                                                 const std::vector<std::uint64_t>& seeds, const ProbeData& train,
                                                 const ProbeData& eval, const TrainConfig& cfg) {
    if (!is_sinkhorn(base.kind)) throw Error("sinkhorn-grid sweep needs a Sinkhorn head");
    if (ks.empty() || taus.empty() || seeds.empty()) throw Error("empty sweep grid");
    std::vector<SweepRow> rows;
    for (int k : ks) {
        for (double tau : taus) {
            HeadSpec spec = base;
            spec.sinkhorn.iterations = k;
            spec.sinkhorn.tau = tau;
            SweepRow row;
            row.keys = {{"K", std::to_string(k)}, {"tau", format_double(tau)}};
            for (auto s : seeds) {
                row.seeds.push_back(s);
                row.accuracies.push_back(solo_best_accuracy(spec, train, eval, cfg, s));
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline std::vector<SweepRow> sweep_state_dim(const HeadSpec& base, const std::vector<int>& n_states,
                                             const std::vector<std::uint64_t>& seeds, const ProbeData& train,
                                             const ProbeData& eval, const TrainConfig& cfg) {
    if (!is_s4(base.kind)) throw Error("state-dim sweep needs an S4 head");
    if (n_states.empty() || seeds.empty()) throw Error("empty sweep grid");
    std::vector<SweepRow> rows;
    for (int n : n_states) {
        HeadSpec spec = base;
        spec.n_state = n;
        SweepRow row;
        row.keys = {{"n_state", std::to_string(n)}};
        for (auto s : seeds) {
            row.seeds.push_back(s);
            row.accuracies.push_back(solo_best_accuracy(spec, train, eval, cfg, s));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Columns: sweep keys, mean, std, n_seeds, then one acc_seed<s> column per seed.
inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    if (!rows.empty()) {
        for (const auto& [k, v] : rows.front().keys) out << k << ',';
        out << "mean,std,n_seeds";
        for (auto s : rows.front().seeds) out << ",acc_seed" << s;
        out << '\n';
    }
    for (const auto& r : rows) {
        for (const auto& [k, v] : r.keys) out << v << ',';
        out << format_double(r.mean()) << ',' << format_double(r.stddev()) << ',' << r.accuracies.size();
        for (double a : r.accuracies) out << ',' << format_double(a);
        out << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Scramble ablation

struct AblationRow {
    std::uint64_t seed = 0;
    double normal = 0.0;
    double scramble = 0.0;
    double no_routing = 0.0;
    double random_perm = 0.0;
};

inline double mode_accuracy(const S4Head& head, const ProbeData& data, RoutingMode mode, std::uint64_t seed) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto s = data[i];
        Eigen::Index arg = 0;
        head.logits_with_mode(s, mode, seed, eval_pass(0)).maxCoeff(&arg);
        if (static_cast<std::uint32_t>(arg) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline AblationRow ablate_scramble(const S4Head& head, const ProbeData& eval, std::uint64_t seed) {
    if (!head.has_plan()) throw Error("scramble ablation needs a Sinkhorn head");
    AblationRow r;
    r.seed = seed;
    r.normal = mode_accuracy(head, eval, RoutingMode::Normal, seed);
    r.scramble = mode_accuracy(head, eval, RoutingMode::ScrambleAfterRouting, seed);
    r.no_routing = mode_accuracy(head, eval, RoutingMode::NoRouting, seed);
    r.random_perm = mode_accuracy(head, eval, RoutingMode::RandomPermBeforeS4, seed);
    return r;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "seed,normal,scramble_after_routing,no_routing,random_perm_before_s4\n";
    for (const auto& r : rows)
        out << r.seed << ',' << format_double(r.normal) << ',' << format_double(r.scramble) << ','
            << format_double(r.no_routing) << ',' << format_double(r.random_perm) << '\n';
    if (!out) throw Error("write failed: " + path);
}

}  // namespace ssmprobe
