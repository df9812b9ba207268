#include "ssmprobe/ssmprobe.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace ssmprobe;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// --run-dir wins, then --run-root/<name>, then $SSMPROBE_RUN_ROOT/<name>, then runs/<name>.
fs::path resolve_run_dir(const std::string& run_dir, const std::string& run_root, const std::string& name) {
    if (!run_dir.empty()) return run_dir;
    std::string root = run_root;
    if (root.empty())
        if (const char* env = std::getenv("SSMPROBE_RUN_ROOT"); env && *env) root = env;
    if (root.empty()) root = "runs";
    return fs::path(root) / name;
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
    return os.str();
}

Json input_record(const std::string& path) { return {{"path", path}, {"fnv1a", file_digest(path)}}; }

struct LoadedConfig {
    RunConfig config;
    std::string run_name;
    Json previous_inputs;  // set when re-executing from a manifest
};

/// Accepts either a run config or a manifest written by a previous run.
LoadedConfig load_config(const std::string& path) {
    const Json j = load_json_file(path);
    LoadedConfig out;
    if (j.is_object() && j.contains("tool") && j.contains("config")) {
        out.config = run_config_from_json(j.at("config"));
        out.run_name = j.value("run_name", std::string("run")) + "-rerun";
        out.previous_inputs = j.value("inputs", Json::object());
    } else {
        out.config = run_config_from_json(j, fs::absolute(path).parent_path().string());
        out.run_name = fs::path(path).stem().string();
    }
    return out;
}

void warn_on_changed_inputs(const LoadedConfig& lc, const Json& inputs) {
    for (const auto& [key, rec] : lc.previous_inputs.items())
        if (inputs.contains(key) && inputs.at(key).at("fnv1a") != rec.at("fnv1a"))
            std::cerr << "warning: " << key << " differs from the recorded run (" << rec.at("path").get<std::string>()
                      << ")\n";
}

Json base_manifest(const std::string& command, const LoadedConfig& lc) {
    return {{"tool", "ssmprobe"},
            {"version", std::string(kVersion)},
            {"command", command},
            {"run_name", lc.run_name},
            {"config", to_json(lc.config)}};
}

struct Datasets {
    ProbeData train;
    ProbeData eval;
    Json inputs;
};

Datasets load_datasets(const RunConfig& c) {
    Datasets d;
    d.train = ProbeData(read_features(c.train_features, "train"));
    d.eval = ProbeData(read_features(c.eval_features, "eval"));
    d.inputs = {{"train_features", input_record(c.train_features)}, {"eval_features", input_record(c.eval_features)}};
    return d;
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out, const std::string& split) {
    SynthSpec spec = synth_spec_from_json(load_json_file(spec_path));
    if (!split.empty()) spec.split_tag = split;
    const auto set = generate_synthetic(spec);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_features(set, out);
    std::cout << "wrote " << out << ": samples=" << set.size() << " grid=" << set.grid_h << "x" << set.grid_w
              << " N=" << set.num_tokens() << " d=" << set.d << " classes=" << set.num_classes
              << " split=" << spec.split_tag << "\n";
    return 0;
}

int cmd_inspect(const std::string& path, bool as_json) {
    const auto set = read_features(path);
    std::vector<std::size_t> counts(set.num_classes, 0);
    for (const auto& s : set.samples) ++counts[s.label];
    if (as_json) {
        std::cout << Json{{"path", path},
                          {"format_version", kFeatureFormatVersion},
                          {"grid_h", set.grid_h},
                          {"grid_w", set.grid_w},
                          {"num_tokens", set.num_tokens()},
                          {"d", set.d},
                          {"num_classes", set.num_classes},
                          {"samples", set.size()},
                          {"label_counts", counts}}
                         .dump(2)
                  << "\n";
        return 0;
    }
    std::cout << "file: " << path << "\n"
              << "format version: " << kFeatureFormatVersion << "\n"
              << "grid: " << set.grid_h << "x" << set.grid_w << " (N=" << set.num_tokens() << ")\n"
              << "d: " << set.d << "\n"
              << "classes: " << set.num_classes << "\n"
              << "samples: " << set.size() << "\n"
              << "labels:";
    for (std::size_t c = 0; c < counts.size(); ++c) std::cout << " " << c << ":" << counts[c];
    std::cout << "\n";
    return 0;
}

struct RunDirFlags {
    std::string run_dir;
    std::string run_root;
    std::string name;
};

int cmd_train(const std::string& config_path, const RunDirFlags& f) {
    const auto t0 = Clock::now();
    const auto lc = load_config(config_path);
    const auto dir = resolve_run_dir(f.run_dir, f.run_root, f.name.empty() ? lc.run_name : f.name);
    const auto data = load_datasets(lc.config);
    warn_on_changed_inputs(lc, data.inputs);
    const double load_s = seconds_since(t0);

    const auto t1 = Clock::now();
    const auto run = train_joint(lc.config.heads, data.train, data.eval, lc.config.train);
    const double train_s = seconds_since(t1);

    fs::create_directories(dir / "checkpoints");
    write_metrics_csv(run.metrics, (dir / "metrics.csv").string());
    write_eval_wide_csv(run, (dir / "eval_wide.csv").string());
    write_summary_csv(run, (dir / "summary.csv").string());
    Json checkpoints = Json::object(), results = Json::object();
    for (const auto& h : run.heads) {
        const auto& name = h.head->spec().name;
        save_checkpoint(*h.head, (dir / "checkpoints" / name).string());
        checkpoints[name] = "checkpoints/" + name + ".json";
        results[name] = {{"best_eval_acc", h.best_eval_acc},
                         {"best_step", h.best_step},
                         {"params", h.head->layout().trainable_size()}};
    }

    Json m = base_manifest("train", lc);
    m["seeds"] = run.seeds;
    m["inputs"] = data.inputs;
    m["artifacts"] = {{"metrics", "metrics.csv"},
                      {"eval_wide", "eval_wide.csv"},
                      {"summary", "summary.csv"},
                      {"checkpoints", checkpoints}};
    m["results"] = results;
    m["total_steps"] = run.total_steps;
    m["timings"] = {{"load_s", load_s}, {"train_s", train_s}, {"total_s", seconds_since(t0)}};
    save_json_file(m, (dir / "manifest.json").string());

    std::cout << "run dir: " << dir.string() << "\n";
    for (const auto& h : run.heads)
        std::cout << "  " << h.head->spec().name << ": best eval acc " << h.best_eval_acc << " at step " << h.best_step
                  << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& kind, const std::vector<std::uint64_t>& seeds,
              const RunDirFlags& f) {
    const auto t0 = Clock::now();
    auto lc = load_config(config_path);
    if (!lc.config.sweep) throw Error(config_path + ": config has no \"sweep\" section");
    auto& sw = *lc.config.sweep;
    if (!seeds.empty()) sw.seeds = seeds;
    const auto dir = resolve_run_dir(f.run_dir, f.run_root, f.name.empty() ? lc.run_name + "-" + kind : f.name);
    const auto data = load_datasets(lc.config);
    warn_on_changed_inputs(lc, data.inputs);

    const HeadSpec* base = nullptr;
    for (const auto& h : lc.config.heads)
        if (h.name == sw.head) base = &h;
    if (!base) throw Error("sweep head '" + sw.head + "' not found");

    const auto t1 = Clock::now();
    const auto rows = kind == "sinkhorn-grid"
                          ? sweep_sinkhorn_grid(*base, sw.iterations, sw.taus, sw.seeds, data.train, data.eval,
                                                lc.config.train)
                          : sweep_state_dim(*base, sw.n_states, sw.seeds, data.train, data.eval, lc.config.train);
    const double sweep_s = seconds_since(t1);

    fs::create_directories(dir);
    const std::string csv = "sweep_" + kind + ".csv";
    write_sweep_csv(rows, (dir / csv).string());
    Json m = base_manifest("sweep", lc);
    m["sweep_kind"] = kind;
    m["inputs"] = data.inputs;
    m["artifacts"] = {{"table", csv}};
    m["timings"] = {{"sweep_s", sweep_s}, {"total_s", seconds_since(t0)}};
    save_json_file(m, (dir / "manifest.json").string());

    std::cout << "run dir: " << dir.string() << "\n";
    for (const auto& r : rows) {
        std::cout << " ";
        for (const auto& [k, v] : r.keys) std::cout << " " << k << "=" << v;
        std::cout << ": mean " << r.mean() << " std " << r.stddev() << "\n";
    }
    return 0;
}

const S4Head& require_plan_head(const Head& head) {
    const auto* s4 = dynamic_cast<const S4Head*>(&head);
    if (!s4 || !s4->has_plan()) throw Error("head produces no transport plan");
    return *s4;
}

ProbeData load_checked(const std::string& features, const Head& head) {
    ProbeData data(read_features(features, "eval"));
    if (!(data.geometry() == head.geometry()))
        throw Error("feature geometry of " + features + " does not match the checkpoint");
    return data;
}

std::uint32_t parse_evidence_class(const std::string& text) {
    std::string v = text;
    if (v.rfind("class=", 0) == 0) v = v.substr(6);
    std::size_t used = 0;
    unsigned long c = 0;
    try {
        c = std::stoul(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw Error("--evidence expects class=<index>, got '" + text + "'");
    return static_cast<std::uint32_t>(c);
}

struct DiagnoseFlags {
    std::string checkpoint;
    std::string features;
    std::string plans_file;
    std::string export_plans;
    std::string out;
    std::string run_root;
    bool plans = false;
    bool aggregate = false;
    std::vector<std::string> evidence;
    double gamma = 0.0;  // 0 = spectral radius of the trained system
    double edge_band = kDefaultEdgeBand;
    std::size_t max_samples = 0;
    std::vector<std::uint64_t> ablate_seeds;
};

int cmd_diagnose(const DiagnoseFlags& f) {
    if (!f.plans && f.evidence.empty() && f.plans_file.empty() && f.ablate_seeds.empty())
        throw Error("nothing to do: pass --plans, --plans-file, --evidence or --ablate-seeds");
    if (f.checkpoint.empty() && (f.plans || !f.evidence.empty() || !f.ablate_seeds.empty()))
        throw Error("--checkpoint is required for --plans, --evidence and --ablate-seeds");
    if ((f.plans || !f.evidence.empty() || !f.ablate_seeds.empty()) && f.features.empty())
        throw Error("--features is required with --checkpoint");

    const std::string stem = f.checkpoint.empty() ? fs::path(f.plans_file).stem().string()
                                                   : fs::path(f.checkpoint).stem().string();
    const fs::path dir = f.out.empty() ? resolve_run_dir("", f.run_root, "diagnose-" + stem) : fs::path(f.out);

    DiagnosticsReport report;
    Json summary = {{"tool", "ssmprobe"}, {"version", std::string(kVersion)}, {"command", "diagnose"}};
    auto add_plans = [&](const std::vector<Matrix>& plans, const std::string& source) {
        if (f.aggregate) {
            report.plans.push_back(aggregate_plan_diagnostics(plans, f.edge_band));
        } else {
            for (const auto& p : plans) report.plans.push_back(plan_diagnostics(p, f.edge_band));
        }
        for (const auto& p : plans) report.stochasticity.push_back(stochasticity_report(p));
        summary["plans"] = {{"source", source}, {"count", plans.size()}, {"aggregated", f.aggregate}};
    };

    if (!f.plans_file.empty()) add_plans(read_plans(f.plans_file), f.plans_file);

    if (!f.checkpoint.empty()) {
        const auto head = load_checkpoint(f.checkpoint);
        summary["checkpoint"] = f.checkpoint;
        summary["head"] = to_json(head->spec());
        const S4Head& s4 = require_plan_head(*head);
        const auto data = load_checked(f.features, *head);
        summary["features"] = input_record(f.features);

        if (f.plans) {
            const auto plans = collect_plans(s4, data, f.max_samples);
            add_plans(plans, f.features);
            if (!f.export_plans.empty()) write_plans(f.export_plans, plans);
        }
        if (!f.evidence.empty()) {
            const double gamma = f.gamma > 0.0 ? f.gamma : default_gamma(s4);
            summary["evidence"] = Json::array();
            for (const auto& e : f.evidence) {
                const auto ev = summarize_evidence(s4, data, parse_evidence_class(e), gamma, f.max_samples);
                report.curves.push_back(ev.mean_raster);
                report.curves.push_back(ev.mean_routed);
                summary["evidence"].push_back({{"class", ev.class_index},
                                               {"gamma", ev.gamma},
                                               {"samples", ev.samples},
                                               {"late_mass_raster", ev.late_mass_raster},
                                               {"late_mass_routed", ev.late_mass_routed}});
            }
        }
        if (!f.ablate_seeds.empty()) {
            std::vector<AblationRow> rows;
            for (auto seed : f.ablate_seeds) rows.push_back(ablate_scramble(s4, data, seed));
            fs::create_directories(dir);
            write_ablation_csv(rows, (dir / "ablation.csv").string());
            summary["ablation"] = "ablation.csv";
        }
    }

    emit_report(report, dir.string());
    save_json_file(summary, (dir / "summary.json").string());
    std::cout << "report dir: " << dir.string() << "\n";
    if (summary.contains("evidence"))
        for (const auto& e : summary["evidence"])
            std::cout << "  class " << e["class"] << ": late mass raster " << e["late_mass_raster"].get<double>()
                      << " routed " << e["late_mass_routed"].get<double>() << "\n";
    return 0;
}

int cmd_ablate(const std::string& checkpoint, const std::string& features, const std::vector<std::uint64_t>& seeds,
               const std::string& out) {
    const auto head = load_checkpoint(checkpoint);
    const auto& s4 = require_plan_head(*head);
    const auto data = load_checked(features, *head);
    std::vector<AblationRow> rows;
    for (auto seed : seeds) rows.push_back(ablate_scramble(s4, data, seed));
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_ablation_csv(rows, out);
    std::cout << "wrote " << out << "\n";
    for (const auto& r : rows)
        std::cout << "  seed " << r.seed << ": normal " << r.normal << " scramble " << r.scramble << " no-routing "
                  << r.no_routing << " random-perm " << r.random_perm << "\n";
    return 0;
}

void add_run_dir_flags(CLI::App* cmd, RunDirFlags& f) {
    cmd->add_option("--run-dir", f.run_dir, "Exact output directory");
    cmd->add_option("--run-root", f.run_root, "Parent of the run directory (default $SSMPROBE_RUN_ROOT or ./runs)");
    cmd->add_option("--name", f.name, "Run directory name under the root (default: config file stem)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequence-model probes over frozen patch features"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    std::string spec_path, out_path, split;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic needle feature file");
    synth->add_option("--spec", spec_path, "Synthetic dataset spec (JSON)")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", out_path, "Output feature file")->required();
    synth->add_option("--split", split, "Override the spec's split tag (train/eval)");

    std::string inspect_path;
    bool inspect_json = false;
    auto* inspect = app.add_subcommand("inspect", "Print the header and label histogram of a feature file");
    inspect->add_option("file", inspect_path, "Feature file")->required();
    inspect->add_flag("--json", inspect_json, "Machine-readable output");

    std::string config_path;
    RunDirFlags run_flags;
    auto* train = app.add_subcommand("train", "Train the configured heads jointly");
    train->add_option("config", config_path, "Run config or a previous run's manifest.json")->required();
    add_run_dir_flags(train, run_flags);

    std::string sweep_kind;
    std::vector<std::uint64_t> sweep_seeds;
    auto* sweep = app.add_subcommand("sweep", "Sinkhorn (K, tau) grid or state-dimension sweep");
    sweep->add_option("config", config_path, "Run config with a \"sweep\" section")->required();
    sweep->add_option("--kind", sweep_kind, "sinkhorn-grid or state-dim")
        ->required()
        ->check(CLI::IsMember({"sinkhorn-grid", "state-dim"}));
    sweep->add_option("--seeds", sweep_seeds, "Override the config's sweep seeds");
    add_run_dir_flags(sweep, run_flags);

    DiagnoseFlags dflags;
    auto* diagnose = app.add_subcommand("diagnose", "Plan diagnostics, evidence curves and ablations");
    diagnose->add_option("--checkpoint", dflags.checkpoint, "Checkpoint manifest (.json)");
    diagnose->add_option("--features", dflags.features, "Eval feature file");
    diagnose->add_flag("--plans", dflags.plans, "Diagnose the head's transport plans per eval sample");
    diagnose->add_flag("--aggregate", dflags.aggregate, "Report one diagnostic of the mean plan instead");
    diagnose->add_option("--plans-file", dflags.plans_file, "Diagnose externally produced plans (SSPL format)");
    diagnose->add_option("--export-plans", dflags.export_plans, "Also write the head's plans in SSPL format");
    diagnose->add_option("--evidence", dflags.evidence, "Evidence curves for class=<c> (repeatable)");
    diagnose->add_option("--gamma", dflags.gamma, "Decay for evidence curves (default: spectral radius of A_bar)")
        ->check(CLI::Range(0.0, 1.0));
    diagnose->add_option("--edge-band", dflags.edge_band, "Total edge band fraction")->check(CLI::Range(0.0, 1.0));
    diagnose->add_option("--max-samples", dflags.max_samples, "Limit the number of eval samples (0 = all)");
    diagnose->add_option("--ablate-seeds", dflags.ablate_seeds, "Also run the scramble ablation for these seeds");
    diagnose->add_option("--out", dflags.out, "Report directory (default <run root>/diagnose-<checkpoint>)");
    diagnose->add_option("--run-root", dflags.run_root, "Parent of the default report directory");

    std::string ab_ckpt, ab_features, ab_out = "ablation.csv";
    std::vector<std::uint64_t> ab_seeds{0, 1, 2};
    auto* ablate = app.add_subcommand("ablate-scramble", "Normal vs scrambled vs unrouted vs random-order accuracy");
    ablate->add_option("--checkpoint", ab_ckpt, "Sinkhorn head checkpoint manifest")->required();
    ablate->add_option("--features", ab_features, "Eval feature file")->required();
    ablate->add_option("--seeds", ab_seeds, "Permutation seeds")->capture_default_str();
    ablate->add_option("--out", ab_out, "Output CSV")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(spec_path, out_path, split);
        if (*inspect) return cmd_inspect(inspect_path, inspect_json);
        if (*train) return cmd_train(config_path, run_flags);
        if (*sweep) return cmd_sweep(config_path, sweep_kind, sweep_seeds, run_flags);
        if (*diagnose) return cmd_diagnose(dflags);
        if (*ablate) return cmd_ablate(ab_ckpt, ab_features, ab_seeds, ab_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
