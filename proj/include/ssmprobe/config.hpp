#pragma once

// JSON run configuration: parsing with location-bearing errors, and the
// frozen snapshot written into run manifests.

#include "ssmprobe/feature_store.hpp"
#include "ssmprobe/heads.hpp"
#include "ssmprobe/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

namespace ssmprobe {

using Json = nlohmann::json;

/// Reads keys from a JSON object, rejecting unknown keys and reporting the
/// JSON-pointer location of every problem.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail("expected an object");
    }

    [[noreturn]] void fail(const std::string& msg, const std::string& key = "") const {
        throw Error((key.empty() ? path_ : path_ + "/" + key) + (path_.empty() && key.empty() ? "" : ": ") + msg);
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const Json& at(const std::string& key) const {
        seen_.insert(key);
        if (!j_.contains(key)) fail("missing required key", key);
        return j_.at(key);
    }

    template <typename T>
    T get(const std::string& key) const {
        const Json& v = at(key);
        // nlohmann converts -1 to a huge unsigned and 2.5 to 2 without complaint.
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_integer()) fail("wrong type (expected integer, got " + std::string(v.type_name()) + ")", key);
            if constexpr (std::is_unsigned_v<T>) {
                if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0) fail("must be nonnegative", key);
                if (v.get<std::uint64_t>() > std::numeric_limits<T>::max()) fail("out of range", key);
            } else if (v.is_number_unsigned() ? v.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<T>::max())
                                              : (v.get<std::int64_t>() < std::numeric_limits<T>::min() ||
                                                 v.get<std::int64_t>() > std::numeric_limits<T>::max())) {
                fail("out of range", key);
            }
        }
        try {
            return v.get<T>();
        } catch (const Json::exception&) {
            fail("wrong type (got " + std::string(v.type_name()) + ")", key);
        }
    }

    template <typename T>
    T get(const std::string& key, T fallback) const {
        if (!j_.contains(key)) {
            seen_.insert(key);
            return fallback;
        }
        return get<T>(key);
    }

    std::string child(const std::string& key) const { return path_ + "/" + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) fail("unknown key", k);
    }

private:
    const Json& j_;
    std::string path_;
    mutable std::set<std::string> seen_;
};

/// Parses JSON text; syntax errors report line and column.
inline Json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        std::size_t line = 1, col = 1;
        const std::size_t stop = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (std::size_t i = 0; i < stop; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        std::string what = e.what();
        if (auto p = what.find("parse error"); p != std::string::npos) what = what.substr(p);
        throw Error(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
    }
}

inline Json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_json_text(ss.str(), path);
}

inline void save_json_file(const Json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------

inline Json to_json(const SinkhornConfig& c) {
    return {{"iterations", c.iterations}, {"tau", c.tau}, {"epsilon_std", c.epsilon_std}};
}

inline SinkhornConfig sinkhorn_config_from_json(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    SinkhornConfig c;
    c.iterations = r.get<int>("iterations", c.iterations);
    c.tau = r.get<double>("tau", c.tau);
    c.epsilon_std = r.get<double>("epsilon_std", c.epsilon_std);
    r.finish();
    try {
        c.validate();
    } catch (const Error& e) {
        r.fail(e.what());
    }
    return c;
}

inline Json to_json(const HeadSpec& s) {
    Json j = {{"name", s.name}, {"kind", to_string(s.kind)}};
    if (s.kind == HeadKind::S4Scan) j["family"] = to_string(s.family);
    if (is_s4(s.kind)) {
        j["n_state"] = s.n_state;
        j["a_trainable"] = s.a_trainable;
        j["shared_directions"] = s.shared_directions;
    }
    if (s.kind == HeadKind::TopK) j["top_k"] = s.top_k;
    if (is_sinkhorn(s.kind)) j["sinkhorn"] = to_json(s.sinkhorn);
    return j;
}

inline HeadSpec head_spec_from_json(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    HeadSpec s;
    s.name = r.get<std::string>("name");
    if (s.name.empty()) r.fail("must not be empty", "name");
    // Names become CSV columns and checkpoint file names.
    for (char ch : s.name)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-' && ch != '.')
            r.fail("may only contain letters, digits, '_', '-' and '.'", "name");
    try {
        s.kind = head_kind_from_string(r.get<std::string>("kind"));
    } catch (const Error& e) {
        r.fail(e.what(), "kind");
    }
    if (r.has("family")) {
        if (s.kind != HeadKind::S4Scan) r.fail("only valid for kind s4_scan", "family");
        try {
            s.family = scan_family_from_string(r.get<std::string>("family"));
        } catch (const Error& e) {
            r.fail(e.what(), "family");
        }
    }
    s.n_state = r.get<int>("n_state", s.n_state);
    if (s.n_state < 1) r.fail("must be >= 1", "n_state");
    s.a_trainable = r.get<bool>("a_trainable", s.a_trainable);
    s.shared_directions = r.get<bool>("shared_directions", s.shared_directions);
    s.top_k = r.get<std::size_t>("top_k", s.top_k);
    if (r.has("sinkhorn")) s.sinkhorn = sinkhorn_config_from_json(r.at("sinkhorn"), r.child("sinkhorn"));
    r.finish();
    return s;
}

inline Json to_json(const SynthSpec& s) {
    return {{"n_samples", s.n_samples},
            {"grid_h", s.grid_h},
            {"grid_w", s.grid_w},
            {"d", s.d},
            {"num_classes", s.num_classes},
            {"needle_count", s.needle_count},
            {"signal_scale", s.signal_scale},
            {"noise_scale", s.noise_scale},
            {"distractor_rate", s.distractor_rate},
            {"center_bias", s.center_bias},
            {"shared_direction", s.shared_direction},
            {"seed", s.seed},
            {"split_tag", s.split_tag}};
}

inline SynthSpec synth_spec_from_json(const Json& j, const std::string& path = "") {
    ObjectReader r(j, path);
    SynthSpec s;
    s.n_samples = r.get<std::size_t>("n_samples", s.n_samples);
    s.grid_h = r.get<std::uint32_t>("grid_h", s.grid_h);
    s.grid_w = r.get<std::uint32_t>("grid_w", s.grid_w);
    s.d = r.get<std::uint32_t>("d", s.d);
    s.num_classes = r.get<std::uint32_t>("num_classes", s.num_classes);
    s.needle_count = r.get<std::uint32_t>("needle_count", s.needle_count);
    s.signal_scale = r.get<double>("signal_scale", s.signal_scale);
    s.noise_scale = r.get<double>("noise_scale", s.noise_scale);
    s.distractor_rate = r.get<double>("distractor_rate", s.distractor_rate);
    s.center_bias = r.get<double>("center_bias", s.center_bias);
    s.shared_direction = r.get<double>("shared_direction", s.shared_direction);
    s.seed = r.get<std::uint64_t>("seed", s.seed);
    s.split_tag = r.get<std::string>("split_tag", s.split_tag);
    r.finish();
    try {
        validate(s);
    } catch (const Error& e) {
        r.fail(e.what());
    }
    return s;
}

struct SweepSpec {
    std::string head;  // name of the head in `heads` to sweep
    std::vector<int> iterations{1, 5, 10, 20};
    std::vector<double> taus{0.1, 0.2, 0.5, 1.0};
    std::vector<int> n_states{1, 2, 4, 8, 16, 32, 64, 128, 256};
    std::vector<std::uint64_t> seeds{0};
};

/// Everything needed to re-execute a run.
struct RunConfig {
    std::string train_features;
    std::string eval_features;
    TrainConfig train;
    std::vector<HeadSpec> heads;
    std::optional<SweepSpec> sweep;
    std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
};

inline Json to_json(const TrainConfig& c) {
    Json frozen = Json::array();
    for (const auto& f : c.frozen_heads) frozen.push_back(f);
    return {{"lr", c.lr},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"frozen_heads", frozen}};
}

inline Json to_json(const RunConfig& c) {
    Json j;
    j["train_features"] = c.train_features;
    j["eval_features"] = c.eval_features;
    j["train"] = to_json(c.train);
    j["heads"] = Json::array();
    for (const auto& h : c.heads) j["heads"].push_back(to_json(h));
    if (c.sweep) {
        j["sweep"] = {{"head", c.sweep->head},
                      {"iterations", c.sweep->iterations},
                      {"taus", c.sweep->taus},
                      {"n_states", c.sweep->n_states},
                      {"seeds", c.sweep->seeds}};
    }
    j["ablation_seeds"] = c.ablation_seeds;
    return j;
}

/// Parses a run config. Relative feature paths are resolved against `base_dir`.
inline RunConfig run_config_from_json(const Json& j, const std::string& base_dir = "") {
    ObjectReader r(j, "");
    RunConfig c;
    auto resolve = [&](std::string p) {
        if (!base_dir.empty() && !p.empty() && std::filesystem::path(p).is_relative())
            p = (std::filesystem::path(base_dir) / p).lexically_normal().string();
        return p;
    };
    c.train_features = resolve(r.get<std::string>("train_features"));
    c.eval_features = resolve(r.get<std::string>("eval_features"));

    if (r.has("train")) {
        ObjectReader t(r.at("train"), "/train");
        c.train.lr = t.get<double>("lr", c.train.lr);
        c.train.batch_size = t.get<std::size_t>("batch_size", c.train.batch_size);
        c.train.epochs = t.get<std::size_t>("epochs", c.train.epochs);
        c.train.weight_decay = t.get<double>("weight_decay", c.train.weight_decay);
        c.train.seed = t.get<std::uint64_t>("seed", c.train.seed);
        c.train.eval_every = t.get<std::size_t>("eval_every", c.train.eval_every);
        for (const auto& f : t.get<std::vector<std::string>>("frozen_heads", {})) c.train.frozen_heads.insert(f);
        t.finish();
        try {
            c.train.validate();
        } catch (const Error& e) {
            t.fail(e.what());
        }
    }

    const Json& heads = r.at("heads");
    if (!heads.is_array() || heads.empty()) r.fail("must be a nonempty array", "heads");
    std::set<std::string> names;
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const auto path = "/heads/" + std::to_string(i);
        c.heads.push_back(head_spec_from_json(heads[i], path));
        if (!names.insert(c.heads.back().name).second) throw Error(path + "/name: duplicate head name");
    }
    for (const auto& f : c.train.frozen_heads)
        if (!names.count(f)) throw Error("/train/frozen_heads: unknown head '" + f + "'");

    if (r.has("sweep")) {
        ObjectReader s(r.at("sweep"), "/sweep");
        SweepSpec sw;
        sw.head = s.get<std::string>("head");
        if (!names.count(sw.head)) s.fail("unknown head '" + sw.head + "'", "head");
        sw.iterations = s.get<std::vector<int>>("iterations", sw.iterations);
        sw.taus = s.get<std::vector<double>>("taus", sw.taus);
        sw.n_states = s.get<std::vector<int>>("n_states", sw.n_states);
        sw.seeds = s.get<std::vector<std::uint64_t>>("seeds", sw.seeds);
        s.finish();
        c.sweep = sw;
    }
    c.ablation_seeds = r.get<std::vector<std::uint64_t>>("ablation_seeds", c.ablation_seeds);
    r.finish();
    return c;
}

}  // namespace ssmprobe
