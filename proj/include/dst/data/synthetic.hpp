#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dst/data/sample.hpp"
#include "dst/numcore/errors.hpp"
#include "dst/numcore/ops.hpp"

namespace dst::data {

/// Planted-cue task: background noise with contiguous segments whose mean is
/// the class signature. Signatures come from `signature_seed` so train and
/// test sets drawn with different `seed`s share them.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t feature_dim = 32;
  std::size_t min_length = 64;
  std::size_t max_length = 128;
  double cue_min_fraction = 0.05;
  double cue_max_fraction = 0.30;
  std::size_t cues_per_sample = 1;
  double noise = 1.0;
  double separation = 1.0;
  std::size_t count = 2000;
  std::uint64_t seed = 1;
  std::uint64_t signature_seed = 0;

  void validate() const {
    std::string bad;
    if (classes < 2) bad += " classes must be >= 2;";
    if (feature_dim == 0) bad += " feature_dim must be >= 1;";
    if (min_length < 8) bad += " min_length must be >= 8;";
    if (max_length < min_length) bad += " max_length must be >= min_length;";
    if (!(cue_min_fraction > 0.0 && cue_min_fraction < 1.0)) bad += " cue_min_fraction must lie in (0, 1);";
    if (!(cue_max_fraction > 0.0 && cue_max_fraction < 1.0)) bad += " cue_max_fraction must lie in (0, 1);";
    if (cue_max_fraction < cue_min_fraction) bad += " cue_max_fraction must be >= cue_min_fraction;";
    if (cues_per_sample == 0) bad += " cues_per_sample must be >= 1;";
    if (!(noise >= 0.0)) bad += " noise must be >= 0;";
    if (!(separation >= 0.0)) bad += " separation must be >= 0;";
    if (!bad.empty()) {
      bad.pop_back();
      throw ConfigError("invalid synthetic data settings:" + bad);
    }
  }
};

// Row c is the signature of class c: a random direction scaled to `separation`.
inline Tensor class_signatures(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.signature_seed);
  Tensor sig = Tensor::matrix(spec.classes, spec.feature_dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double norm = 0.0;
    for (std::size_t i = 0; i < spec.feature_dim; ++i) {
      sig(c, i) = num::normal01(rng);
      norm += sig(c, i) * sig(c, i);
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < spec.feature_dim; ++i) sig(c, i) *= spec.separation / norm;
  }
  return sig;
}

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

/// Samples are labelled i mod C; features are rounded to 32-bit reals so they
/// survive a round trip through feature files unchanged.
inline std::vector<Sample> generate(const SyntheticSpec& spec) {
  spec.validate();
  const Tensor sig = class_signatures(spec);
  std::mt19937_64 rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Sample s;
    s.id = "syn" + std::to_string(spec.seed) + "_" + std::to_string(i);
    s.label = i % spec.classes;
    const std::size_t len = spec.min_length + num::uniform_index(rng, spec.max_length - spec.min_length + 1);
    s.valid = len;
    s.cue_mask.assign(len, 0);
    for (std::size_t c = 0; c < spec.cues_per_sample; ++c) {
      const double frac = spec.cue_min_fraction + (spec.cue_max_fraction - spec.cue_min_fraction) * num::uniform01(rng);
      const std::size_t cue = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * double(len))), 1, len);
      const std::size_t start = num::uniform_index(rng, len - cue + 1);
      std::fill(s.cue_mask.begin() + static_cast<std::ptrdiff_t>(start),
                s.cue_mask.begin() + static_cast<std::ptrdiff_t>(start + cue), 1);
    }
    s.features = Tensor::matrix(len, spec.feature_dim);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t k = 0; k < spec.feature_dim; ++k) {
        const double mean = s.cue_mask[t] ? sig(s.label, k) : 0.0;
        s.features(t, k) = to_f32(mean + spec.noise * num::normal01(rng));
      }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dst::data
