#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dst/attention/decision_log.hpp"
#include "dst/attention/variant.hpp"
#include "dst/numcore/errors.hpp"
#include "json.hpp"

namespace dst::metrics {

using Labels = std::span<const std::size_t>;

namespace detail {

inline void check(Labels preds, Labels labels, const char* what) {
  if (labels.empty()) throw ContractError(std::string(what) + ": no samples");
  if (preds.size() != labels.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
}

inline std::size_t class_count(Labels preds, Labels labels) {
  std::size_t c = 0;
  for (std::size_t x : preds) c = std::max(c, x + 1);
  for (std::size_t x : labels) c = std::max(c, x + 1);
  return c;
}

}  // namespace detail

/// confusion[true][pred]
inline std::vector<std::vector<std::size_t>> confusion_matrix(Labels preds, Labels labels, std::size_t classes) {
  detail::check(preds, labels, "confusion_matrix");
  std::vector<std::vector<std::size_t>> m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || preds[i] >= classes) throw IndexError("confusion_matrix: class index out of range");
    ++m[labels[i]][preds[i]];
  }
  return m;
}

/// Overall accuracy.
inline double weighted_accuracy(Labels preds, Labels labels) {
  detail::check(preds, labels, "weighted_accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Mean recall over the classes present in `labels`.
inline double unweighted_accuracy(Labels preds, Labels labels) {
  detail::check(preds, labels, "unweighted_accuracy");
  const auto m = confusion_matrix(preds, labels, detail::class_count(preds, labels));
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < m.size(); ++c) {
    std::size_t support = 0;
    for (std::size_t x : m[c]) support += x;
    if (support == 0) continue;
    sum += static_cast<double>(m[c][c]) / static_cast<double>(support);
    ++present;
  }
  return sum / static_cast<double>(present);
}

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

// Zero denominators give 0.
inline std::vector<ClassScores> per_class_scores(const std::vector<std::vector<std::size_t>>& m) {
  std::vector<ClassScores> out(m.size());
  for (std::size_t c = 0; c < m.size(); ++c) {
    std::size_t predicted = 0, support = 0;
    for (std::size_t r = 0; r < m.size(); ++r) predicted += m[r][c];
    for (std::size_t x : m[c]) support += x;
    const double tp = static_cast<double>(m[c][c]);
    ClassScores& s = out[c];
    s.support = support;
    s.precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    s.recall = support ? tp / static_cast<double>(support) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return out;
}

/// Support-weighted mean of per-class F1.
inline double weighted_f1(Labels preds, Labels labels) {
  detail::check(preds, labels, "weighted_f1");
  const auto scores = per_class_scores(confusion_matrix(preds, labels, detail::class_count(preds, labels)));
  double sum = 0.0;
  for (const auto& s : scores) sum += s.f1 * static_cast<double>(s.support);
  return sum / static_cast<double>(labels.size());
}

struct PatSummary {
  double overall = 0.0;
  std::vector<double> per_layer;
  std::vector<std::vector<double>> per_layer_head;
};

struct EvalReport {
  std::string variant;
  std::size_t sample_count = 0;
  double wa = 0.0;
  double ua = 0.0;
  double wf1 = 0.0;
  std::vector<ClassScores> per_class;
  std::vector<std::vector<std::size_t>> confusion;
  std::optional<PatSummary> pat;
};

/// All metrics for one evaluation. Full attention reports PAT 100 even when
/// no decisions were recorded.
inline EvalReport build_report(Labels preds, Labels labels, std::size_t classes,
                               const attn::AttentionVariant& variant, const attn::PatAccumulator* pat = nullptr) {
  detail::check(preds, labels, "build_report");
  EvalReport r;
  r.variant = variant.name();
  r.sample_count = labels.size();
  r.confusion = confusion_matrix(preds, labels, classes);
  r.per_class = per_class_scores(r.confusion);
  r.wa = weighted_accuracy(preds, labels);
  r.ua = unweighted_accuracy(preds, labels);
  r.wf1 = weighted_f1(preds, labels);
  if (pat && !pat->empty()) {
    r.pat = PatSummary{pat->overall(), pat->per_layer(), pat->per_layer_head()};
  } else if (variant.kind() == attn::AttentionKind::Full) {
    r.pat = PatSummary{100.0, {}, {}};
  }
  return r;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["sample_count"] = r.sample_count;
  j["wa"] = r.wa;
  j["ua"] = r.ua;
  j["wf1"] = r.wf1;
  auto& pc = j["per_class"] = nlohmann::ordered_json::array();
  for (const auto& s : r.per_class) {
    nlohmann::ordered_json c;
    c["precision"] = s.precision;
    c["recall"] = s.recall;
    c["f1"] = s.f1;
    c["support"] = s.support;
    pc.push_back(c);
  }
  j["confusion"] = r.confusion;
  if (r.pat) {
    j["pat"]["overall"] = r.pat->overall;
    j["pat"]["per_layer"] = r.pat->per_layer;
    j["pat"]["per_layer_head"] = r.pat->per_layer_head;
  } else {
    j["pat"] = nullptr;
  }
  return j;
}

}  // namespace dst::metrics
