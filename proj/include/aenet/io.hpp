#pragma once

// JSON configs and reports, CSV loss curves, and on-disk episode directories.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <cstdio>
#include <map>
#include <type_traits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aenet/synth.hpp"
#include "aenet/tensor.hpp"
#include "aenet/tio.hpp"
#include "aenet/trainer.hpp"

namespace aenet::io {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T expect(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ContractError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw ContractError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ContractError("");
    } else {
      if (!v.is_string()) throw ContractError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ContractError("config: key '" + key + "' has the wrong type or sign: " + v.dump());
  }
}

using Setter = std::function<void(TrainConfig&, const json&)>;

template <typename T, typename Get>
std::pair<std::string, Setter> field(const std::string& key, Get get) {
  return {key, [key, get](TrainConfig& c, const json& v) { get(c) = expect<T>(v, key); }};
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      field<std::size_t>("channels", [](TrainConfig& c) -> auto& { return c.gen.channels; }),
      field<std::size_t>("height", [](TrainConfig& c) -> auto& { return c.gen.height; }),
      field<std::size_t>("width", [](TrainConfig& c) -> auto& { return c.gen.width; }),
      field<std::size_t>("shots", [](TrainConfig& c) -> auto& { return c.gen.shots; }),
      field<double>("sigma", [](TrainConfig& c) -> auto& { return c.gen.sigma; }),
      field<double>("noise_std", [](TrainConfig& c) -> auto& { return c.gen.noise_std; }),
      field<std::size_t>("n_bg_classes_per_image", [](TrainConfig& c) -> auto& { return c.gen.n_bg_classes_per_image; }),
      field<std::size_t>("n_base_classes", [](TrainConfig& c) -> auto& { return c.gen.n_base_classes; }),
      field<std::size_t>("n_novel_classes", [](TrainConfig& c) -> auto& { return c.gen.n_novel_classes; }),
      field<std::uint64_t>("seed", [](TrainConfig& c) -> auto& { return c.seed; }),
      field<std::size_t>("episodes_train", [](TrainConfig& c) -> auto& { return c.episodes_train; }),
      field<std::size_t>("episodes_eval", [](TrainConfig& c) -> auto& { return c.episodes_eval; }),
      field<double>("lr", [](TrainConfig& c) -> auto& { return c.lr; }),
      field<double>("momentum", [](TrainConfig& c) -> auto& { return c.momentum; }),
      field<std::size_t>("blocks", [](TrainConfig& c) -> auto& { return c.blocks; }),
      field<double>("lambda", [](TrainConfig& c) -> auto& { return c.lambda; }),
      field<double>("dice_smooth", [](TrainConfig& c) -> auto& { return c.dice_smooth; }),
      field<double>("bce_eps", [](TrainConfig& c) -> auto& { return c.bce_eps; }),
      field<bool>("use_aenet", [](TrainConfig& c) -> auto& { return c.use_aenet; }),
      field<double>("temperature", [](TrainConfig& c) -> auto& { return c.temperature; }),
      field<bool>("shared_fusion", [](TrainConfig& c) -> auto& { return c.shared_fusion; }),
      field<double>("clip_norm", [](TrainConfig& c) -> auto& { return c.clip_norm; }),
      field<std::size_t>("accumulate", [](TrainConfig& c) -> auto& { return c.accumulate; }),
      field<std::size_t>("threads", [](TrainConfig& c) -> auto& { return c.threads; }),
      {"prior",
       [](TrainConfig& c, const json& v) { c.prior = parse_prior_source(expect<std::string>(v, "prior")); }},
  };
  return table;
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  return json{
      {"channels", c.gen.channels},
      {"height", c.gen.height},
      {"width", c.gen.width},
      {"shots", c.gen.shots},
      {"sigma", c.gen.sigma},
      {"noise_std", c.gen.noise_std},
      {"n_bg_classes_per_image", c.gen.n_bg_classes_per_image},
      {"n_base_classes", c.gen.n_base_classes},
      {"n_novel_classes", c.gen.n_novel_classes},
      {"seed", c.seed},
      {"episodes_train", c.episodes_train},
      {"episodes_eval", c.episodes_eval},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"blocks", c.blocks},
      {"lambda", c.lambda},
      {"dice_smooth", c.dice_smooth},
      {"bce_eps", c.bce_eps},
      {"use_aenet", c.use_aenet},
      {"prior", prior_source_name(c.prior)},
      {"temperature", c.temperature},
      {"shared_fusion", c.shared_fusion},
      {"clip_norm", c.clip_norm},
      {"accumulate", c.accumulate},
      {"threads", c.threads},
  };
}

// Overlays the keys of `j` on `cfg`. Unknown keys and mistyped values are
// contract errors.
inline void apply_json(TrainConfig& cfg, const json& j) {
  if (!j.is_object()) throw ContractError("config: top level must be a JSON object");
  const auto& table = detail::setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ContractError("config: unknown key '" + key + "'");
    it->second(cfg, value);
  }
}

inline json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(origin + ": malformed JSON: " + e.what());
  }
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string() + " for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path.string());
}

inline TrainConfig load_config(const fs::path& path) {
  TrainConfig cfg;
  apply_json(cfg, read_json_file(path));
  return cfg;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force)
    throw ContractError("refusing to overwrite " + path.string() + " (pass --force)");
}

inline void write_text(const fs::path& path, const std::string& text, bool force) {
  ensure_writable(path, force);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

inline json to_json(const RunReport& r) {
  json records = json::array();
  for (const auto& e : r.records)
    records.push_back({{"split", synth::split_name(e.split)}, {"index", e.index}, {"fg_class", e.fg_class}, {"iou", e.iou}});
  return json{
      {"seed", r.config.seed},
      {"novel", {{"miou", r.novel_miou}, {"fb_iou", r.novel_fb_iou}}},
      {"base_holdout", {{"miou", r.base_miou}, {"fb_iou", r.base_fb_iou}}},
      {"loss_curve", r.loss_curve},
      {"episodes", records},
      {"config", to_json(r.config)},
      {"wall_clock_s", r.wall_clock_s},
      {"parameter_count", r.parameter_count},
      {"class_audit_passed", r.class_audit_passed},
  };
}

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Episode directories
//
//   manifest.json                       config echo, split, per-episode entries
//   ep0000_query_feat.ftns              C×H×W, f64
//   ep0000_query_feat_high.ftns
//   ep0000_query_gt.pgm
//   ep0000_s0_feat.ftns / _feat_high.ftns / _mask.pgm
// ---------------------------------------------------------------------------

struct StoredEpisode {
  synth::Episode<double> episode;
  json entry;
};

inline json write_episode(const fs::path& dir, const std::string& stem, const synth::Episode<double>& ep, bool force) {
  auto put_tensor = [&](const std::string& name, const Tensor<double>& t) {
    ensure_writable(dir / name, force);
    tio::write_tensor(dir / name, t);
    return name;
  };
  auto put_mask = [&](const std::string& name, const Tensor<double>& m) {
    ensure_writable(dir / name, force);
    tio::write_mask_pgm(dir / name, m);
    return name;
  };
  json supports = json::array();
  for (std::size_t k = 0; k < ep.supports.size(); ++k) {
    const auto& s = ep.supports[k];
    const std::string p = stem + "_s" + std::to_string(k);
    supports.push_back({{"feat", put_tensor(p + "_feat.ftns", s.feat)},
                        {"feat_high", put_tensor(p + "_feat_high.ftns", s.feat_high)},
                        {"mask", put_mask(p + "_mask.pgm", s.mask)},
                        {"bg_classes", s.bg_classes}});
  }
  return json{{"index", ep.index},
              {"fg_class", ep.fg_class},
              {"blur_radius", ep.blur_radius},
              {"query_feat", put_tensor(stem + "_query_feat.ftns", ep.query_feat)},
              {"query_feat_high", put_tensor(stem + "_query_feat_high.ftns", ep.query_feat_high)},
              {"query_gt", put_mask(stem + "_query_gt.pgm", ep.query_gt)},
              {"query_bg_classes", ep.query_bg_classes},
              {"supports", supports}};
}

// Generates `count` episodes starting at draw index `first` and writes them
// with a manifest. Returns the manifest.
inline json write_episode_dir(const fs::path& dir, const TrainConfig& cfg, synth::Split split, std::size_t count,
                              std::uint64_t first = 0, bool force = false) {
  if (count < 1) throw ContractError("gen: count must be >= 1");
  fs::create_directories(dir);
  ensure_writable(dir / "manifest.json", force);
  const synth::EpisodeGenerator gen(cfg.generator());
  json episodes = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "ep%04zu", i);
    episodes.push_back(write_episode(dir, stem, gen.generate(split, first + i), force));
  }
  json manifest{{"config", to_json(cfg)}, {"seed", cfg.seed}, {"split", synth::split_name(split)}, {"count", count},
                {"episodes", episodes}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n", true);
  return manifest;
}

namespace detail {

inline const json& member(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(where + ": missing '" + key + "'");
  return j.at(key);
}

inline std::string file_member(const json& j, const std::string& key, const std::string& where) {
  const auto& v = member(j, key, where);
  if (!v.is_string()) throw FormatError(where + ": '" + key + "' must be a file name");
  return v.get<std::string>();
}

}  // namespace detail

inline synth::Episode<double> read_episode(const fs::path& dir, const json& entry, synth::Split split) {
  using detail::file_member;
  using detail::member;
  synth::Episode<double> ep;
  try {
    ep.fg_class = member(entry, "fg_class", "manifest").get<int>();
    ep.blur_radius = member(entry, "blur_radius", "manifest").get<double>();
    ep.index = member(entry, "index", "manifest").get<std::uint64_t>();
    if (entry.contains("query_bg_classes")) ep.query_bg_classes = entry.at("query_bg_classes").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: malformed episode entry: ") + e.what());
  }
  ep.split = split;
  ep.query_feat = tio::read_tensor<double>(dir / file_member(entry, "query_feat", "manifest"));
  ep.query_feat_high = tio::read_tensor<double>(dir / file_member(entry, "query_feat_high", "manifest"));
  ep.query_gt = tio::read_mask_pgm<double>(dir / file_member(entry, "query_gt", "manifest"));
  const auto& supports = member(entry, "supports", "manifest");
  if (!supports.is_array() || supports.empty()) throw FormatError("manifest: 'supports' must be a non-empty array");
  for (const auto& s : supports) {
    synth::Shot<double> shot;
    shot.feat = tio::read_tensor<double>(dir / file_member(s, "feat", "manifest support"));
    shot.feat_high = tio::read_tensor<double>(dir / file_member(s, "feat_high", "manifest support"));
    shot.mask = tio::read_mask_pgm<double>(dir / file_member(s, "mask", "manifest support"));
    if (s.contains("bg_classes")) shot.bg_classes = s.at("bg_classes").get<std::vector<int>>();
    ep.supports.push_back(std::move(shot));
  }
  ep.validate();
  return ep;
}

inline std::vector<StoredEpisode> read_episode_dir(const fs::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  const auto split = synth::parse_split(detail::member(manifest, "split", "manifest").get<std::string>());
  const auto& eps = detail::member(manifest, "episodes", "manifest");
  if (!eps.is_array()) throw FormatError("manifest: 'episodes' must be an array");
  std::vector<StoredEpisode> out;
  for (const auto& e : eps) out.push_back({read_episode(dir, e, split), e});
  return out;
}

}  // namespace aenet::io
