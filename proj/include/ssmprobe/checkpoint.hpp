#pragma once

// Head checkpoints: a flat little-endian f64 parameter file plus a JSON
// manifest describing the head, its geometry and every parameter block.

#include "ssmprobe/binary_io.hpp"
#include "ssmprobe/config.hpp"
#include "ssmprobe/heads.hpp"

#include <filesystem>

namespace ssmprobe {

inline constexpr int kCheckpointVersion = 1;

inline Json checkpoint_manifest(const Head& head, const std::string& params_file) {
    const auto& s = head.spec();
    const auto& g = head.geometry();
    Json blocks = Json::array();
    for (const auto& b : head.layout().blocks())
        blocks.push_back({{"name", b.name}, {"shape", {b.rows, b.cols}}, {"offset", b.offset}, {"trainable", b.trainable}});
    Json j = {{"version", kCheckpointVersion},
              {"head", to_json(s)},
              {"seed", head.seed()},
              {"d", g.d},
              {"geometry", {{"grid_h", g.grid_h}, {"grid_w", g.grid_w}, {"d", g.d}, {"num_classes", g.num_classes}}},
              {"num_params", head.params().size()},
              {"params_file", params_file},
              {"blocks", blocks}};
    if (is_s4(s.kind)) {
        j["n_state"] = s.n_state;
        j["a_trainable"] = s.a_trainable;
    }
    return j;
}

/// Writes <stem>.bin and <stem>.json; returns the manifest path.
inline std::string save_checkpoint(const Head& head, const std::string& stem) {
    namespace fs = std::filesystem;
    const fs::path bin = stem + ".bin";
    const fs::path manifest = stem + ".json";
    if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
    io::Writer w;
    for (double v : head.params()) w.f64(v);
    w.save(bin.string());
    save_json_file(checkpoint_manifest(head, bin.filename().string()), manifest.string());
    return manifest.string();
}

inline std::unique_ptr<Head> load_checkpoint(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const Json j = load_json_file(manifest_path);
    if (j.at("version").get<int>() != kCheckpointVersion) throw Error("checkpoint version mismatch");
    const HeadSpec spec = head_spec_from_json(j.at("head"), "/head");
    const Json& g = j.at("geometry");
    const Geometry geo{g.at("grid_h").get<std::uint32_t>(), g.at("grid_w").get<std::uint32_t>(),
                       g.at("d").get<std::uint32_t>(), g.at("num_classes").get<std::uint32_t>()};
    auto head = make_head(spec, geo, j.at("seed").get<std::uint64_t>());
    const auto n = j.at("num_params").get<std::size_t>();
    if (n != head->params().size()) throw Error("checkpoint parameter count does not match head layout");

    const auto bin = fs::path(manifest_path).parent_path() / j.at("params_file").get<std::string>();
    auto r = io::Reader::from_file(bin.string());
    if (r.remaining() != n * sizeof(double)) throw Error("checkpoint payload size does not match manifest");
    std::vector<double> p(n);
    for (auto& v : p) v = r.f64();
    head->set_params(p);
    return head;
}

}  // namespace ssmprobe
