#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dst/attention/geometry.hpp"
#include "dst/numcore/errors.hpp"

namespace dst::attn {

// Everything needed to redraw one query's attention row offline.
struct QueryTrace {
  WindowDecision decision;
  std::vector<double> positions;  // attended positions (integers unless sampled)
  std::vector<double> weights;    // boundary weights, 1 where none apply
  std::vector<double> attention;  // softmax over the positions
};

/// Average percentage of activated tokens, kept per (layer, head) so both the
/// joint average and per-layer numbers can be reported.
class PatAccumulator {
 public:
  void add(const WindowDecision& d) {
    ensure(d.layer, d.head);
    const double pct = 100.0 * static_cast<double>(d.activated_tokens()) /
                       static_cast<double>(d.valid_length);
    sums_[d.layer][d.head] += pct;
    counts_[d.layer][d.head] += 1;
  }

  void merge(const PatAccumulator& other) {
    for (std::size_t l = 0; l < other.sums_.size(); ++l) {
      for (std::size_t h = 0; h < other.sums_[l].size(); ++h) {
        if (other.counts_[l][h] == 0) continue;
        ensure(l, h);
        sums_[l][h] += other.sums_[l][h];
        counts_[l][h] += other.counts_[l][h];
      }
    }
  }

  bool empty() const { return total_count() == 0; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& row : counts_)
      for (std::size_t c : row) n += c;
    return n;
  }

  double overall() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t l = 0; l < sums_.size(); ++l)
      for (std::size_t h = 0; h < sums_[l].size(); ++h) {
        s += sums_[l][h];
        n += counts_[l][h];
      }
    if (n == 0) throw ContractError("pat: no decisions recorded");
    return s / static_cast<double>(n);
  }

  std::vector<double> per_layer() const {
    std::vector<double> out;
    for (std::size_t l = 0; l < sums_.size(); ++l) {
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t h = 0; h < sums_[l].size(); ++h) {
        s += sums_[l][h];
        n += counts_[l][h];
      }
      out.push_back(n ? s / static_cast<double>(n) : 0.0);
    }
    return out;
  }

  std::vector<std::vector<double>> per_layer_head() const {
    std::vector<std::vector<double>> out(sums_.size());
    for (std::size_t l = 0; l < sums_.size(); ++l)
      for (std::size_t h = 0; h < sums_[l].size(); ++h)
        out[l].push_back(counts_[l][h] ? sums_[l][h] / static_cast<double>(counts_[l][h]) : 0.0);
    return out;
  }

 private:
  void ensure(std::size_t layer, std::size_t head) {
    if (sums_.size() <= layer) {
      sums_.resize(layer + 1);
      counts_.resize(layer + 1);
    }
    if (sums_[layer].size() <= head) {
      sums_[layer].resize(head + 1, 0.0);
      counts_[layer].resize(head + 1, 0);
    }
  }

  std::vector<std::vector<double>> sums_;
  std::vector<std::vector<std::size_t>> counts_;
};

/// Mean over decisions of activated / L_valid * 100.
inline double pat(std::span<const WindowDecision> decisions) {
  if (decisions.empty()) throw ContractError("pat: no decisions given");
  double s = 0.0;
  for (const auto& d : decisions) {
    if (d.valid_length == 0) throw ContractError("pat: decision with zero valid length");
    s += 100.0 * static_cast<double>(d.activated_tokens()) / static_cast<double>(d.valid_length);
  }
  return s / static_cast<double>(decisions.size());
}

/// Sink for the per-query decisions an attention layer makes. Records are
/// optional so long evaluations can keep only the PAT sums.
class DecisionLog {
 public:
  explicit DecisionLog(bool keep_records = true, bool keep_traces = false)
      : keep_records_(keep_records), keep_traces_(keep_traces) {}

  bool keep_traces() const { return keep_traces_; }

  void add(const WindowDecision& d) {
    pat_.add(d);
    if (keep_records_) records_.push_back(d);
  }

  void add_trace(QueryTrace t) {
    if (keep_traces_) traces_.push_back(std::move(t));
  }

  const std::vector<WindowDecision>& records() const { return records_; }
  const std::vector<QueryTrace>& traces() const { return traces_; }
  const PatAccumulator& pat() const { return pat_; }

  void merge(const DecisionLog& other) {
    pat_.merge(other.pat_);
    if (keep_records_) records_.insert(records_.end(), other.records_.begin(), other.records_.end());
    if (keep_traces_) traces_.insert(traces_.end(), other.traces_.begin(), other.traces_.end());
  }

 private:
  bool keep_records_;
  bool keep_traces_;
  PatAccumulator pat_;
  std::vector<WindowDecision> records_;
  std::vector<QueryTrace> traces_;
};

}  // namespace dst::attn
