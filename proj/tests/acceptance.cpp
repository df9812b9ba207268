// One PASS/FAIL line per acceptance criterion; exits 1 if any criterion fails.

#include "oracles.hpp"
#include "ssmprobe/ssmprobe.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace ssmprobe;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
    Matrix m(r, c);
    std::normal_distribution<double> n(0.0, sd);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
    return m;
}

Matrix uniform_costs(Rng& rng, Eigen::Index n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) c(i, j) = u(rng);
    return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string source_path(const std::string& rel) { return std::string(SSMPROBE_SOURCE_DIR) + "/" + rel; }

// ---------------------------------------------------------------------------
// Shared synthetic experiment: the shipped configs, trained once per seed.

struct Experiment {
    ProbeData train;
    ProbeData eval;
    RunConfig cfg;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<TrainRun> runs;
    double train_seconds = 0.0;
};

Experiment& experiment() {
    static Experiment e = [] {
        Experiment x;
        x.train = ProbeData(generate_synthetic(synth_spec_from_json(load_json_file(source_path("configs/synth_train.json")))));
        x.eval = ProbeData(generate_synthetic(synth_spec_from_json(load_json_file(source_path("configs/synth_eval.json")))));
        x.cfg = run_config_from_json(load_json_file(source_path("configs/train.json")), source_path("configs"));
        const auto t0 = std::chrono::steady_clock::now();
        for (auto s : x.seeds) {
            TrainConfig tc = x.cfg.train;
            tc.seed = s;
            x.runs.push_back(train_joint(x.cfg.heads, x.train, x.eval, tc));
        }
        x.train_seconds = seconds_since(t0);
        return x;
    }();
    return e;
}

const S4Head& sinkhorn_head(const TrainRun& run) {
    for (const auto& h : run.heads)
        if (h.head->spec().kind == HeadKind::S4Sinkhorn) return dynamic_cast<const S4Head&>(*h.head);
    throw Error("config has no s4_sinkhorn head");
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    FeatureSet set;
    set.grid_h = 3;
    set.grid_w = 3;
    set.d = 4;
    set.num_classes = 3;
    auto rng = make_rng(2024, "acceptance/fd");
    for (int i = 0; i < 3; ++i) {
        FeatureSample s;
        s.patch_tokens = random_matrix(rng, 9, 4).cast<float>();
        s.cls_token = VectorF::Zero(4);
        s.label = static_cast<std::uint32_t>(i);
        set.samples.push_back(s);
    }
    const ProbeData data(set);
    HeadSpec spec;
    spec.name = "sk";
    spec.kind = HeadKind::S4Sinkhorn;
    spec.n_state = 4;
    spec.sinkhorn.iterations = 5;
    spec.sinkhorn.tau = 0.2;
    auto head = make_head(spec, data.geometry(), 11);
    // Nonzero classifier so every upstream block receives gradient.
    std::vector<double> p(head->params().begin(), head->params().end());
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto& v : p) v += 0.1 * nd(rng);
    const auto& wb = head->layout().find("classifier.W");
    for (std::size_t i = 0; i < wb.size(); ++i) p[wb.offset + i] = nd(rng);
    head->set_params(p);

    const std::vector<std::size_t> batch{0, 1, 2};
    std::vector<double> grad(p.size());
    head->batch_gradient(data, batch, 0, grad);
    auto loss = [&](const std::vector<double>& v) {
        head->set_params(v);
        std::vector<double> scratch(v.size());
        return head->batch_gradient(data, batch, 0, scratch);
    };
    const double err = oracle::max_rel_error(grad, oracle::finite_difference(loss, p));
    const double secs = seconds_since(t0);
    return {err < 1e-4 && secs < 10.0,
            "max rel err " + fmt(err, 3) + " over " + std::to_string(p.size()) + " params, " + fmt(secs, 3) + " s"};
}

Outcome kernel_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    auto rng = make_rng(2024, "acceptance/kernel");
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 16);
        const auto n_tok = 1 + static_cast<Eigen::Index>(rng() % 64);
        S4Params p = init_s4(n, rng);
        p.A += random_matrix(rng, n, n, 0.1);
        p.D = 0.3;
        p.delta_raw = inverse_softplus(std::uniform_real_distribution<double>(kMinStep, kMaxStep)(rng));
        const auto sys = discretize(p);
        const Matrix u = random_matrix(rng, n_tok, 3);
        const Vector ref = oracle::kernel_sum(sys.A_bar, sys.B_bar, p.C, p.D, u);
        worst = std::max(worst, (s4_forward(p, sys, u).z_out - ref).cwiseAbs().maxCoeff());
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 30.0, "max abs diff " + fmt(worst, 3) + " on 100 instances, " + fmt(secs, 3) + " s"};
}

Outcome discretization() {
    S4Params p;
    p.A = Matrix::Constant(1, 1, -1.0);
    p.B = Vector::Constant(1, 1.0);
    p.C = Vector::Constant(1, 1.0);
    p.delta_raw = inverse_softplus(0.1);
    const auto sys = discretize(p);
    const bool scalar_ok = p.step() == 0.1 && sys.A_bar(0, 0) == 0.95 / 1.05 && sys.B_bar[0] == 0.1 / 1.05;

    double worst = 0.0;
    for (int n = 1; n <= 256; ++n) {
        for (double dt : {1e-3, 5e-2, 1e-1}) {
            S4Params h;
            h.A = hippo_legs(n);
            h.B = Vector::Ones(n);
            h.C = Vector::Ones(n);
            h.delta_raw = inverse_softplus(dt);
            worst = std::max(worst, spectral_radius(discretize(h).A_bar));
        }
    }
    return {scalar_ok && worst < 1.0,
            std::string("scalar ") + (scalar_ok ? "exact" : "MISMATCH") + ", max rho over n=1..256 x 3 steps " +
                fmt(worst, 10)};
}

Outcome sinkhorn_invariants() {
    auto rng = make_rng(2024, "acceptance/sinkhorn");
    SinkhornConfig cfg;
    double min_entry = 1.0, max_marg = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto plan = sinkhorn(uniform_costs(rng, 16), cfg);
        min_entry = std::min(min_entry, plan.P.minCoeff());
        max_marg = std::max({max_marg, plan.row_marginal_err, plan.col_marginal_err});
    }
    bool uniform_exact = true;
    for (Eigen::Index n : {2, 7, 16, 196})
        uniform_exact = uniform_exact && (sinkhorn(Matrix::Zero(n, n), cfg).P.array() == 1.0 / static_cast<double>(n)).all();

    SinkhornConfig sharp;
    sharp.iterations = 20000;
    sharp.tau = 1e-3;
    int agree = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix c = uniform_costs(rng, 8);
        if (row_argmax(sinkhorn(c, sharp).P) == oracle::hungarian(c)) ++agree;
    }
    return {min_entry >= 0.0 && max_marg < 1e-3 && uniform_exact && agree == 50,
            "min entry " + fmt(min_entry, 3) + ", max marginal err " + fmt(max_marg, 3) + ", zero-cost uniform " +
                (uniform_exact ? "exact" : "INEXACT") + ", Hungarian agreement " + std::to_string(agree) + "/50"};
}

Outcome invariance_split() {
    auto rng = make_rng(2024, "acceptance/invariance");
    FeatureSet set;
    set.grid_h = 4;
    set.grid_w = 4;
    set.d = 6;
    set.num_classes = 5;
    FeatureSample s;
    s.patch_tokens = random_matrix(rng, 16, 6).cast<float>();
    s.cls_token = random_matrix(rng, 6, 1).cast<float>();
    set.samples.push_back(s);
    const ProbeData data(set);
    const auto x = data[0];

    double worst_pool = 0.0;
    for (auto k : {HeadKind::GAP, HeadKind::CLS, HeadKind::AttnPool, HeadKind::ContentWeighted}) {
        HeadSpec spec;
        spec.name = to_string(k);
        spec.kind = k;
        auto head = make_head(spec, data.geometry(), 3);
        std::vector<double> p(head->params().begin(), head->params().end());
        std::normal_distribution<double> nd(0.0, 0.5);
        for (auto& v : p) v += nd(rng);
        head->set_params(p);
        const Vector base = head->logits(x, 0);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<std::size_t> perm(16);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            const Matrix t = apply_order({perm}, x.tokens);
            const SampleRef y{t, x.cls, x.label, x.sample_id};
            worst_pool = std::max(worst_pool, (head->logits(y, 0) - base).cwiseAbs().maxCoeff());
        }
    }

    double min_change = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 50; ++trial) {
        const S4Params p = init_s4(4, rng);
        Matrix t = random_matrix(rng, 9, 3);
        const Vector z0 = s4_forward(p, t).z_out;
        const auto i = static_cast<Eigen::Index>(rng() % 9);
        auto j = static_cast<Eigen::Index>(rng() % 8);
        if (j >= i) ++j;
        t.row(i).swap(t.row(j));
        min_change = std::min(min_change, (s4_forward(p, t).z_out - z0).cwiseAbs().maxCoeff());
    }
    return {worst_pool <= 1e-12 && min_change > 1e-8,
            "pooling max change " + fmt(worst_pool, 3) + " over 4 kinds x 100 perms, S4 min change under row swap " +
                fmt(min_change, 3) + " over 50 instances"};
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

Outcome order_gap() {
    auto& e = experiment();
    std::vector<double> gap_acc, sink_acc, fixed_acc;
    std::string best_fixed_name;
    std::map<std::string, std::vector<double>> per_head;
    for (const auto& run : e.runs)
        for (const auto& h : run.heads) per_head[h.head->spec().name].push_back(h.best_eval_acc);
    double best_fixed = -1.0, gap = -1.0, sink = -1.0;
    for (const auto& spec : e.cfg.heads) {
        const double m = mean_of(per_head.at(spec.name));
        if (spec.kind == HeadKind::GAP) gap = m;
        if (spec.kind == HeadKind::S4Sinkhorn) sink = m;
        if (spec.kind == HeadKind::S4Scan && m > best_fixed) {
            best_fixed = m;
            best_fixed_name = spec.name;
        }
    }
    const bool pass = sink > best_fixed && best_fixed > gap && sink - best_fixed >= 0.05 && e.train_seconds < 600.0;
    return {pass, "mean eval acc over 3 seeds: sinkhorn " + fmt(sink) + ", best fixed (" + best_fixed_name + ") " +
                      fmt(best_fixed) + ", gap " + fmt(gap) + "; training " + fmt(e.train_seconds, 3) + " s"};
}

Outcome scramble_ablation() {
    auto& e = experiment();
    const double noise = 2.0 * std::sqrt(2.0 * 0.25 / static_cast<double>(e.eval.size()));
    bool pass = true;
    std::string detail;
    for (std::size_t i = 0; i < e.seeds.size(); ++i) {
        const auto r = ablate_scramble(sinkhorn_head(e.runs[i]), e.eval, e.seeds[i]);
        pass = pass && r.normal > r.scramble && r.scramble >= r.random_perm - noise;
        detail += "seed " + std::to_string(e.seeds[i]) + ": normal " + fmt(r.normal) + " scramble " + fmt(r.scramble) +
                  " random " + fmt(r.random_perm) + "; ";
    }
    return {pass, detail + "noise " + fmt(noise, 3)};
}

Outcome diagnostics_fixed_points() {
    bool pass = true;
    std::string detail;
    for (std::size_t n : {16, 196}) {
        const auto id = plan_diagnostics(Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
        const Matrix u = sinkhorn(Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)), {}).P;
        const auto un = plan_diagnostics(u);
        const double inv = 1.0 / static_cast<double>(n);
        const bool ok = id.rank_coverage == 1.0 && id.norm_entropy == 1.0 && un.rank_coverage == inv &&
                        un.norm_entropy == 0.0 && std::abs(un.row_max_mean - inv) < 1e-15 && un.unique_positions == 1;
        pass = pass && ok;
        detail += "N=" + std::to_string(n) + ": identity cov " + fmt(id.rank_coverage) + " ent " + fmt(id.norm_entropy) +
                  ", uniform cov " + fmt(un.rank_coverage) + " ent " + fmt(un.norm_entropy) + " rowmax " +
                  fmt(un.row_max_mean) + "; ";
    }
    return {pass, detail};
}

Outcome evidence_scheduling() {
    auto& e = experiment();
    bool pass = true;
    std::string detail;
    for (std::size_t r = 0; r < e.runs.size(); ++r) {
        const auto& head = sinkhorn_head(e.runs[r]);
        const double gamma = default_gamma(head);
        double raster = 0.0, routed = 0.0;
        for (std::size_t i = 0; i < e.eval.size(); ++i) {
            const auto x = e.eval[i];
            const auto pair = evidence_pair(head, x.tokens, x.label, gamma);
            raster += late_mass_statistic(pair.raster);
            routed += late_mass_statistic(pair.routed);
        }
        raster /= static_cast<double>(e.eval.size());
        routed /= static_cast<double>(e.eval.size());
        pass = pass && routed > raster;
        detail += "seed " + std::to_string(e.seeds[r]) + ": routed " + fmt(routed) + " raster " + fmt(raster) + "; ";
    }
    return {pass, detail};
}

Outcome parameter_count() {
    HeadSpec spec;
    spec.name = "gap";
    const auto n = count_params(spec, Geometry{14, 14, 768, 1000});
    return {n == 769000u, "GAP d=768 C=1000: " + std::to_string(n)};
}

Outcome isolation_determinism() {
    SynthSpec ss;
    ss.n_samples = 60;
    ss.grid_h = 3;
    ss.grid_w = 3;
    ss.d = 6;
    ss.num_classes = 4;
    ss.distractor_rate = 0.2;
    const ProbeData train(generate_synthetic(ss));
    ss.split_tag = "eval";
    ss.n_samples = 30;
    const ProbeData eval(generate_synthetic(ss));

    std::vector<HeadSpec> specs(3);
    specs[0].name = "gap";
    specs[1].name = "snake";
    specs[1].kind = HeadKind::S4Scan;
    specs[1].family = ScanFamilyKind::Snake;
    specs[1].n_state = 4;
    specs[2].name = "sk";
    specs[2].kind = HeadKind::S4Sinkhorn;
    specs[2].n_state = 4;
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.eval_every = 2;
    cfg.seed = 9;

    const auto joint = train_joint(specs, train, eval, cfg);
    const auto again = train_joint(specs, train, eval, cfg);
    bool solo_equal = true;
    for (const auto& spec : specs) {
        const auto solo = train_joint({spec}, train, eval, cfg);
        const auto& a = joint.head(spec.name);
        const auto& b = solo.heads.front();
        solo_equal = solo_equal && a.final_params == b.final_params && a.eval_history == b.eval_history;
    }
    bool repeat_equal = joint.metrics == again.metrics;
    for (const auto& spec : specs)
        repeat_equal = repeat_equal && joint.head(spec.name).final_params == again.head(spec.name).final_params;

    const bool cosine = cosine_lr(0.01, 0, 100) == 0.01 && std::abs(cosine_lr(0.01, 100, 100)) <= 1e-12;
    return {solo_equal && repeat_equal && cosine, std::string("joint==solo ") + (solo_equal ? "yes" : "NO") +
                                                      ", repeat identical " + (repeat_equal ? "yes" : "NO") +
                                                      ", cosine endpoints " + (cosine ? "exact" : "WRONG")};
}

bool csv_well_formed(const std::string& path, const std::string& header_prefix, std::size_t rows,
                     std::size_t cols) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line) || line.rfind(header_prefix, 0) != 0) return false;
    auto count = [](const std::string& l) { return static_cast<std::size_t>(std::count(l.begin(), l.end(), ',')) + 1; };
    if (count(line) != cols) return false;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (count(line) != cols) return false;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            try {
                std::size_t used = 0;
                std::stod(cell, &used);
                if (used != cell.size()) return false;
            } catch (...) {
                return false;
            }
        ++n;
    }
    return n == rows;
}

Outcome sweeps() {
    auto& e = experiment();
    if (!e.cfg.sweep) return {false, "configs/train.json has no sweep section"};
    const auto& sw = *e.cfg.sweep;
    HeadSpec base;
    for (const auto& h : e.cfg.heads)
        if (h.name == sw.head) base = h;

    const auto dir = std::filesystem::temp_directory_path() / "ssmprobe_acceptance";
    std::filesystem::create_directories(dir);
    const auto grid = sweep_sinkhorn_grid(base, sw.iterations, sw.taus, sw.seeds, e.train, e.eval, e.cfg.train);
    write_sweep_csv(grid, (dir / "grid.csv").string());
    const std::vector<int> dims{4, 64};
    const auto state = sweep_state_dim(base, dims, sw.seeds, e.train, e.eval, e.cfg.train);
    write_sweep_csv(state, (dir / "state.csv").string());

    const std::size_t ns = sw.seeds.size();
    const bool grid_ok = csv_well_formed((dir / "grid.csv").string(), "K,tau,mean,std,n_seeds", sw.iterations.size() * sw.taus.size(), 5 + ns);
    const bool state_ok = csv_well_formed((dir / "state.csv").string(), "n_state,mean,std,n_seeds", 2, 4 + ns);
    const double a4 = state[0].mean(), a64 = state[1].mean();
    std::string per_seed;
    for (std::size_t i = 0; i < ns; ++i)
        per_seed += " " + fmt(state[0].accuracies[i]) + "/" + fmt(state[1].accuracies[i]);
    std::filesystem::remove_all(dir);
    return {grid_ok && state_ok && std::abs(a4 - a64) <= 0.02,
            std::string("grid csv ") + (grid_ok ? "ok" : "MALFORMED") + ", state csv " + (state_ok ? "ok" : "MALFORMED") +
                ", n_state=4 mean " + fmt(a4) + " vs n_state=64 mean " + fmt(a64) + " (per seed 4/64:" + per_seed + ")"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient-correctness", gradient_correctness},
        {"s4-kernel-oracle", kernel_oracle},
        {"discretization", discretization},
        {"sinkhorn-invariants", sinkhorn_invariants},
        {"invariance-sensitivity", invariance_split},
        {"order-gap", order_gap},
        {"scramble-ablation", scramble_ablation},
        {"diagnostics-fixed-points", diagnostics_fixed_points},
        {"evidence-scheduling", evidence_scheduling},
        {"parameter-count", parameter_count},
        {"trainer-isolation-determinism", isolation_determinism},
        {"sweep-drivers", sweeps},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        if (!o.pass) ++failed;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
