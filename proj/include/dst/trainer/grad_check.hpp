#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dst/data/batch.hpp"
#include "dst/model/model.hpp"
#include "dst/numcore/ops.hpp"

namespace dst::train {

using num::Tensor;
using num::Var;

struct GradCheckOptions {
  double step = 1e-5;
  double kink_margin = 0.2;
  double tolerance = 1e-5;           // regular parameters
  double decision_tolerance = 1e-4;  // W^D
  std::size_t max_entries = 0;       // per parameter; 0 checks every entry
  std::uint64_t seed = 0;            // picks entries when max_entries > 0
};

struct GroupCheck {
  std::string name;
  model::ParamKind kind = model::ParamKind::Regular;
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  double scale = 0.0;  // max magnitude among compared entries
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return rel_error < tolerance; }
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  std::size_t queries = 0;
  std::size_t excluded_queries = 0;
  double worst(model::ParamKind kind) const {
    double w = 0.0;
    for (const auto& g : groups)
      if (g.kind == kind) w = std::max(w, g.rel_error);
    return w;
  }
  bool passed() const {
    return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed(); });
  }
};

namespace detail {

inline double batch_loss(const model::DstModel& m, const data::PackedBatch& pb, const attn::FrozenDecisions* frozen,
                         std::vector<Tensor>* grads = nullptr, attn::DecisionLog* log = nullptr,
                         model::ActivationMasks* activations = nullptr) {
  num::Tape tape;
  const model::BoundModel bm = model::bind(tape, m, grads != nullptr);
  model::ForwardOptions o;
  o.frozen = frozen;
  o.log = log;
  o.activations = activations;
  const Var loss = num::cross_entropy(model::forward(bm, pb.features, pb.segments, o), pb.labels);
  if (grads) {
    auto g = tape.backward(loss);
    for (const Var& p : bm.params) grads->push_back(g.take(p.id()));
  }
  return loss.value().item();
}

}  // namespace detail

/// Compares tape gradients of the mean cross-entropy against central
/// differences, parameter by parameter. Dropout is off. Window decisions whose
/// geometry sits within `kink_margin` of an integer are frozen at their
/// current values on both sides of the comparison, and feed-forward ReLU
/// units keep their base-point activation pattern.
inline GradCheckReport grad_check(const model::DstModel& m, const std::vector<data::Sample>& samples,
                                  const GradCheckOptions& opts = {}) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  const data::PackedBatch pb = data::pack(samples, all);

  GradCheckReport report;
  attn::DecisionLog log;
  std::vector<Tensor> analytic;
  detail::batch_loss(m, pb, nullptr, nullptr, &log);
  attn::FrozenDecisions frozen;
  report.queries = log.records().size();
  if (m.config.variant.is_deformable())
    report.excluded_queries = attn::freeze_near_kinks(log.records(), m.config.variant.pins(), opts.kink_margin, frozen);
  model::ActivationMasks masks;
  detail::batch_loss(m, pb, &frozen, &analytic, nullptr, &masks);
  masks.record = false;

  std::mt19937_64 rng(opts.seed);
  model::DstModel probe = m;
  std::size_t group = 0;
  std::vector<std::pair<std::string, model::ParamKind>> names;
  model::visit_params(m, [&](const std::string& name, const Tensor&, model::ParamKind kind) { names.emplace_back(name, kind); });
  model::visit_params(probe, [&](const std::string&, Tensor& p, model::ParamKind) {
    const Tensor& a = analytic[group];
    GroupCheck gc;
    gc.name = names[group].first;
    gc.kind = names[group].second;
    gc.tolerance = gc.kind == model::ParamKind::Decision ? opts.decision_tolerance : opts.tolerance;
    ++group;
    std::vector<std::size_t> entries(p.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (opts.max_entries > 0 && entries.size() > opts.max_entries) {
      for (std::size_t i = 0; i < opts.max_entries; ++i)
        std::swap(entries[i], entries[i + num::uniform_index(rng, entries.size() - i)]);
      entries.resize(opts.max_entries);
    }
    for (std::size_t k : entries) {
      const double orig = p[k];
      p[k] = orig + opts.step;
      const double up = detail::batch_loss(probe, pb, &frozen, nullptr, nullptr, &masks);
      p[k] = orig - opts.step;
      const double down = detail::batch_loss(probe, pb, &frozen, nullptr, nullptr, &masks);
      p[k] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      gc.max_abs_error = std::max(gc.max_abs_error, std::abs(numeric - a[k]));
      gc.scale = std::max({gc.scale, std::abs(numeric), std::abs(a[k])});
      ++gc.checked;
    }
    gc.rel_error = gc.scale > 0.0 ? gc.max_abs_error / gc.scale : 0.0;
    report.groups.push_back(gc);
  });
  return report;
}

}  // namespace dst::train
