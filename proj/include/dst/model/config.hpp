#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dst/attention/variant.hpp"
#include "dst/numcore/errors.hpp"

namespace dst::model {

using attn::AttentionVariant;

struct ModelConfig {
  std::size_t feature_dim = 32;
  std::size_t d_model = 64;
  std::size_t heads = 8;
  std::size_t blocks = 4;
  std::size_t ffn_multiplier = 4;
  std::size_t classes = 4;
  AttentionVariant variant = AttentionVariant::deformable();
  double dropout = 0.1;
  std::size_t max_length = 326;
  bool positional_encoding = false;
  // Scale the selected value rows by the boundary weights too.
  bool weight_values = false;
  double decision_init_scale = 1e-3;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t ffn_dim() const { return ffn_multiplier * d_model; }

  // Columns of the DCN-like sampler: enough points for the longest input.
  std::size_t sampler_points() const {
    const auto n = static_cast<std::size_t>(std::llround(variant.fraction() * static_cast<double>(max_length)));
    return n == 0 ? 1 : n;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (feature_dim == 0) v.push_back("feature_dim must be >= 1");
    if (d_model == 0) v.push_back("d_model must be >= 1");
    if (heads == 0 || (d_model % heads) != 0) v.push_back("heads must divide d_model");
    if (blocks == 0) v.push_back("blocks must be >= 1");
    if (ffn_multiplier == 0) v.push_back("ffn_multiplier must be >= 1");
    if (classes < 2) v.push_back("classes must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) v.push_back("dropout must lie in [0, 1)");
    if (max_length == 0) v.push_back("max_length must be >= 1");
    if (!(decision_init_scale >= 0.0)) v.push_back("decision_init_scale must be >= 0");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += " " + s + ";";
    msg.pop_back();
    throw ConfigError(msg);
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace dst::model
