#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dst/data/synthetic.hpp"
#include "dst/model/config.hpp"
#include "dst/numcore/errors.hpp"
#include "dst/trainer/train.hpp"

namespace dst::cli {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

// Thrown when the config file itself is missing or unreadable.
class MissingConfig : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct DataSource {
  std::optional<data::SyntheticSpec> synthetic = data::SyntheticSpec{};  // test set: same spec, derived seed
  std::size_t test_count = 500;
  std::optional<fs::path> manifest;
  std::optional<fs::path> test_manifest;
};

struct RunConfig {
  std::uint64_t seed = 1;  // model init, shuffling, dropout, validation split
  fs::path out = "runs/default";
  model::ModelConfig model;
  train::TrainConfig train;
  DataSource data;
};

// Seed of the synthetic test set drawn alongside a training spec.
inline std::uint64_t test_seed(std::uint64_t train_seed) { return train_seed + 1000003; }

inline ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  const auto& m = c.model;
  j["model"] = {{"feature_dim", m.feature_dim},
                {"d_model", m.d_model},
                {"heads", m.heads},
                {"blocks", m.blocks},
                {"ffn_multiplier", m.ffn_multiplier},
                {"classes", m.classes},
                {"variant", m.variant.name()},
                {"fraction", m.variant.fraction()},
                {"dropout", m.dropout},
                {"max_length", m.max_length},
                {"positional_encoding", m.positional_encoding},
                {"weight_values", m.weight_values},
                {"decision_init_scale", m.decision_init_scale}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"lr", t.lr},
                {"momentum", t.sgd.momentum},
                {"decision_lr_factor", t.sgd.decision_lr_factor},
                {"batch_size", t.batch_size},
                {"schedule", {{"t0", t.schedule.t0}, {"t_mult", t.schedule.t_mult}, {"min_lr", t.schedule.min_lr}}},
                {"validation_fraction", t.validation_fraction},
                {"patience", t.patience},
                {"clip_norm", t.clip_norm},
                {"chunk_size", t.chunk_size}};
  ordered_json d;
  if (c.data.synthetic) {
    const auto& s = *c.data.synthetic;
    d["synthetic"] = {{"classes", s.classes},
                      {"feature_dim", s.feature_dim},
                      {"min_length", s.min_length},
                      {"max_length", s.max_length},
                      {"cue_min_fraction", s.cue_min_fraction},
                      {"cue_max_fraction", s.cue_max_fraction},
                      {"cues_per_sample", s.cues_per_sample},
                      {"noise", s.noise},
                      {"separation", s.separation},
                      {"count", s.count},
                      {"seed", s.seed},
                      {"signature_seed", s.signature_seed}};
    d["test_count"] = c.data.test_count;
  } else {
    d["synthetic"] = nullptr;
  }
  d["manifest"] = c.data.manifest ? ordered_json(c.data.manifest->string()) : ordered_json(nullptr);
  d["test_manifest"] = c.data.test_manifest ? ordered_json(c.data.test_manifest->string()) : ordered_json(nullptr);
  j["data"] = d;
  return j;
}

// Defaults; a null fraction means the variant's own default.
inline ordered_json default_json() {
  ordered_json j = to_json(RunConfig{});
  j["model"]["fraction"] = nullptr;
  return j;
}

namespace detail {

// Reads `key` from `obj` into `out`, naming the dotted path on type errors.
template <typename T>
void read(const ordered_json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + path + key + "' has the wrong type: " + obj.at(key).dump());
  }
}

inline void reject_unknown(const ordered_json& obj, const ordered_json& reference, const std::string& path) {
  if (!obj.is_object()) throw ConfigError("config key '" + path + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    if (!reference.contains(k)) throw ConfigError("unknown config key '" + path + k + "'");
    if (v.is_object() && reference.at(k).is_object()) reject_unknown(v, reference.at(k), path + k + ".");
  }
}

}  // namespace detail

/// Builds a RunConfig from JSON, filling absent keys with defaults. Unknown
/// keys are errors.
inline RunConfig from_json(const ordered_json& j) {
  detail::reject_unknown(j, default_json(), "");
  RunConfig c;
  detail::read(j, "", "seed", c.seed);
  std::string out = c.out.string();
  detail::read(j, "", "out", out);
  c.out = out;
  if (j.contains("model")) {
    const auto& m = j["model"];
    auto& mc = c.model;
    detail::read(m, "model.", "feature_dim", mc.feature_dim);
    detail::read(m, "model.", "d_model", mc.d_model);
    detail::read(m, "model.", "heads", mc.heads);
    detail::read(m, "model.", "blocks", mc.blocks);
    detail::read(m, "model.", "ffn_multiplier", mc.ffn_multiplier);
    detail::read(m, "model.", "classes", mc.classes);
    std::string variant = mc.variant.name();
    detail::read(m, "model.", "variant", variant);
    mc.variant = attn::parse_variant(variant);
    if (m.contains("fraction") && !m["fraction"].is_null()) {
      double f = 0.0;
      detail::read(m, "model.", "fraction", f);
      mc.variant = attn::AttentionVariant(mc.variant.kind(), f);
    }
    detail::read(m, "model.", "dropout", mc.dropout);
    detail::read(m, "model.", "max_length", mc.max_length);
    detail::read(m, "model.", "positional_encoding", mc.positional_encoding);
    detail::read(m, "model.", "weight_values", mc.weight_values);
    detail::read(m, "model.", "decision_init_scale", mc.decision_init_scale);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    auto& tc = c.train;
    detail::read(t, "train.", "epochs", tc.epochs);
    detail::read(t, "train.", "lr", tc.lr);
    detail::read(t, "train.", "momentum", tc.sgd.momentum);
    detail::read(t, "train.", "decision_lr_factor", tc.sgd.decision_lr_factor);
    detail::read(t, "train.", "batch_size", tc.batch_size);
    if (t.contains("schedule")) {
      const auto& s = t["schedule"];
      detail::read(s, "train.schedule.", "t0", tc.schedule.t0);
      detail::read(s, "train.schedule.", "t_mult", tc.schedule.t_mult);
      detail::read(s, "train.schedule.", "min_lr", tc.schedule.min_lr);
    }
    detail::read(t, "train.", "validation_fraction", tc.validation_fraction);
    detail::read(t, "train.", "patience", tc.patience);
    detail::read(t, "train.", "clip_norm", tc.clip_norm);
    detail::read(t, "train.", "chunk_size", tc.chunk_size);
  }
  c.train.seed = c.seed;
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data.synthetic.reset();
    if (d.contains("synthetic") && !d["synthetic"].is_null()) {
      const auto& s = d["synthetic"];
      data::SyntheticSpec spec;
      detail::read(s, "data.synthetic.", "classes", spec.classes);
      detail::read(s, "data.synthetic.", "feature_dim", spec.feature_dim);
      detail::read(s, "data.synthetic.", "min_length", spec.min_length);
      detail::read(s, "data.synthetic.", "max_length", spec.max_length);
      detail::read(s, "data.synthetic.", "cue_min_fraction", spec.cue_min_fraction);
      detail::read(s, "data.synthetic.", "cue_max_fraction", spec.cue_max_fraction);
      detail::read(s, "data.synthetic.", "cues_per_sample", spec.cues_per_sample);
      detail::read(s, "data.synthetic.", "noise", spec.noise);
      detail::read(s, "data.synthetic.", "separation", spec.separation);
      detail::read(s, "data.synthetic.", "count", spec.count);
      detail::read(s, "data.synthetic.", "seed", spec.seed);
      detail::read(s, "data.synthetic.", "signature_seed", spec.signature_seed);
      c.data.synthetic = spec;
    }
    detail::read(d, "data.", "test_count", c.data.test_count);
    for (auto [key, slot] : {std::pair{"manifest", &c.data.manifest}, std::pair{"test_manifest", &c.data.test_manifest}}) {
      if (d.contains(key) && !d[key].is_null()) {
        std::string p;
        detail::read(d, "data.", key, p);
        *slot = p;
      }
    }
  }
  return c;
}

/// Model, training and data checks plus their agreement with each other.
inline void validate(const RunConfig& c) {
  c.model.validate();
  c.train.validate();
  const bool syn = c.data.synthetic.has_value(), man = c.data.manifest.has_value();
  if (syn == man) throw ConfigError("config must name exactly one data source (data.synthetic or data.manifest)");
  if (c.data.test_manifest && !man) throw ConfigError("data.test_manifest needs data.manifest");
  if (syn) {
    const auto& s = *c.data.synthetic;
    s.validate();
    if (s.feature_dim != c.model.feature_dim) {
      throw ConfigError("data.synthetic.feature_dim (" + std::to_string(s.feature_dim) + ") differs from model.feature_dim (" +
                        std::to_string(c.model.feature_dim) + ")");
    }
    if (s.classes != c.model.classes) {
      throw ConfigError("data.synthetic.classes (" + std::to_string(s.classes) + ") differs from model.classes (" +
                        std::to_string(c.model.classes) + ")");
    }
    if (s.max_length > c.model.max_length) {
      throw ConfigError("data.synthetic.max_length exceeds model.max_length");
    }
  }
}

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
inline void apply_override(ordered_json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  ordered_json value;
  try {
    value = ordered_json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    ordered_json& next = (*node)[part];
    if (next.is_null()) next = ordered_json::object();
    if (!next.is_object()) throw ConfigError("override key '" + key + "': '" + part + "' is not an object");
    node = &next;
    start = dot + 1;
  }
  // Naming a manifest displaces the default synthetic source.
  if (key == "data.manifest" && !value.is_null() && j["data"].contains("synthetic")) j["data"]["synthetic"] = nullptr;
  if (key.rfind("data.synthetic.", 0) == 0 && j["data"].contains("manifest")) j["data"]["manifest"] = nullptr;
}

inline ordered_json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingConfig("cannot read config file " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Defaults, then the config file, then `--set` overrides. A file that names
/// a manifest without a synthetic section drops the synthetic default.
inline ordered_json resolve_json(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  ordered_json j = default_json();
  if (file) {
    const ordered_json user = read_json_file(*file);
    if (!user.is_object()) throw ConfigError("config file " + file->string() + " must hold a JSON object");
    j.merge_patch(user);
    if (user.contains("data") && user["data"].is_object() && user["data"].contains("manifest") &&
        !user["data"]["manifest"].is_null() && !user["data"].contains("synthetic")) {
      j["data"]["synthetic"] = nullptr;
    }
    // merge_patch treats null as deletion; restore explicit nulls.
    if (user.contains("data") && user["data"].is_object()) {
      for (const char* k : {"synthetic", "manifest", "test_manifest"})
        if (user["data"].contains(k) && user["data"][k].is_null()) j["data"][k] = nullptr;
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return j;
}

}  // namespace dst::cli
