#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dst/numcore/errors.hpp"
#include "dst/numcore/ops.hpp"
#include "dst/numcore/tape.hpp"

namespace dst::attn {

using num::Tensor;
using num::Var;

/// Where one query of one head looks. Real-valued bounds follow
/// anchor = j + offset, left = anchor - size, right = anchor + size; [lo, hi]
/// is the integer span actually attended, always inside [0, valid_length - 1].
struct WindowDecision {
  std::size_t layer = 0;
  std::size_t sample = 0;
  std::size_t head = 0;
  std::size_t query = 0;
  std::size_t valid_length = 0;

  double raw_size = 0.0;
  double raw_offset = 0.0;
  double size = 0.0;
  double offset = 0.0;
  double anchor = 0.0;
  double left = 0.0;
  double right = 0.0;

  std::size_t lo = 0;
  std::size_t hi = 0;
  bool fallback = false;
  // Nonzero for sparse sampling (DCN-like): number of interpolated points.
  std::size_t sampled_points = 0;

  std::size_t activated_tokens() const { return sampled_points ? sampled_points : hi - lo + 1; }
};

// Which case of the boundary weighting produced a token's weight.
enum class WeightRule : std::uint8_t { None, Left, Right, AnchorFloor, AnchorCeil };

// d weight / d (left, right, anchor) for a rule. Floor and ceil are held
// constant, so every weighted token is affine in exactly one bound.
struct RuleSlope {
  double left = 0.0;
  double right = 0.0;
  double anchor = 0.0;
};

inline RuleSlope rule_slope(WeightRule r) {
  switch (r) {
    case WeightRule::Left: return {-1.0, 0.0, 0.0};
    case WeightRule::Right: return {0.0, 1.0, 0.0};
    case WeightRule::AnchorFloor: return {0.0, 0.0, -1.0};
    case WeightRule::AnchorCeil: return {0.0, 0.0, 1.0};
    case WeightRule::None: break;
  }
  return {};
}

/// Multiplicative weights over the tokens lo..hi of one window.
struct BoundaryWeights {
  std::size_t lo = 0;
  std::size_t hi = 0;
  std::vector<double> weights;
  std::vector<WeightRule> rules;

  std::size_t size() const { return weights.size(); }
  double at(std::size_t token) const { return weights.at(token - lo); }
  WeightRule rule_at(std::size_t token) const { return rules.at(token - lo); }
};

inline WindowDecision window_bounds(std::size_t query, double size, double offset,
                                    std::size_t valid_length) {
  if (valid_length == 0) throw ContractError("window_bounds: valid length must be positive");
  WindowDecision d;
  d.query = query;
  d.valid_length = valid_length;
  d.size = size;
  d.offset = offset;
  d.anchor = static_cast<double>(query) + offset;
  d.left = d.anchor - size;
  d.right = d.anchor + size;
  const double last = static_cast<double>(valid_length - 1);
  const double lo = std::max(0.0, std::floor(d.left));
  const double hi = std::min(last, std::ceil(d.right));
  if (lo > hi) {
    const double t = std::clamp(std::round(d.anchor), 0.0, last);
    d.lo = d.hi = static_cast<std::size_t>(t);
    d.fallback = true;
  } else {
    d.lo = static_cast<std::size_t>(lo);
    d.hi = static_cast<std::size_t>(hi);
  }
  return d;
}

// Cases are tried in order (left boundary, right boundary, anchor floor,
// anchor ceil); the first one matching a token wins. A boundary that was
// clamped away matches no token, so the edge token keeps weight 1.
inline BoundaryWeights boundary_weights(const WindowDecision& d) {
  if (d.lo > d.hi) throw ContractError("boundary_weights: empty span");
  const double fl = std::floor(d.left);
  const double cr = std::ceil(d.right);
  const double fa = std::floor(d.anchor);
  const double ca = std::ceil(d.anchor);
  BoundaryWeights w;
  w.lo = d.lo;
  w.hi = d.hi;
  w.weights.reserve(d.hi - d.lo + 1);
  w.rules.reserve(d.hi - d.lo + 1);
  for (std::size_t k = d.lo; k <= d.hi; ++k) {
    const double kk = static_cast<double>(k);
    if (kk == fl) {
      w.weights.push_back(1.0 - (d.left - fl));
      w.rules.push_back(WeightRule::Left);
    } else if (kk == cr) {
      w.weights.push_back(1.0 - (cr - d.right));
      w.rules.push_back(WeightRule::Right);
    } else if (kk == fa) {
      w.weights.push_back(1.0 + (ca - d.anchor));
      w.rules.push_back(WeightRule::AnchorFloor);
    } else if (kk == ca) {
      w.weights.push_back(1.0 + (d.anchor - fa));
      w.rules.push_back(WeightRule::AnchorCeil);
    } else {
      w.weights.push_back(1.0);
      w.rules.push_back(WeightRule::None);
    }
  }
  return w;
}

// Distance from x to the nearest integer.
inline double kink_distance(double x) {
  const double f = x - std::floor(x);
  return std::min(f, 1.0 - f);
}

/// Fixed window of max(1, round(fraction * valid)) tokens centred on the
/// query and shifted inward at the sequence edges so its size never shrinks.
inline std::pair<std::size_t, std::size_t> fixed_window_span(std::size_t query, double fraction,
                                                             std::size_t valid_length) {
  const auto width = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(valid_length))));
  const std::size_t w = std::min(width, valid_length);
  const std::size_t half = (w - 1) / 2;
  std::size_t lo = query > half ? query - half : 0;
  lo = std::min(lo, valid_length - w);
  return {lo, lo + w - 1};
}

// Number of interpolated sampling points for a DCN-like query.
inline std::size_t dcn_point_count(double fraction, std::size_t valid_length) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(valid_length))));
}

// Uniform reference grid: point m of n sits at the centre of the m-th of n
// equal cells, so n == valid gives exactly the integer positions 0..valid-1.
inline double dcn_reference(std::size_t m, std::size_t n, std::size_t valid_length) {
  const double stride = static_cast<double>(valid_length) / static_cast<double>(n);
  return (static_cast<double>(m) + 0.5) * stride - 0.5;
}

/// Window size and offset for one query row, recorded on the tape:
/// size = sigmoid(q Wd[:,0]) * L, offset = tanh(q Wd[:,1]) * L.
inline std::pair<Var, Var> decide_window(const Var& query_row, const Var& decision_weights,
                                         std::size_t valid_length) {
  if (valid_length == 0) throw ContractError("decide_window: valid length must be positive");
  if (decision_weights.value().rank() != 2 || decision_weights.value().cols() != 2) {
    throw DimensionError("decide_window: decision matrix must have 2 columns, got " +
                         num::shape_str(decision_weights.shape()));
  }
  const Var raw = num::matmul(query_row, decision_weights);
  const double len = static_cast<double>(valid_length);
  Var size = num::scale(num::sigmoid(num::slice_cols(raw, 0, 1)), len);
  Var offset = num::scale(num::tanh_(num::slice_cols(raw, 1, 1)), len);
  return {size, offset};
}

struct TapedWeights {
  WindowDecision decision;
  BoundaryWeights values;
  Var weights;  // [1 x span], differentiable in size and offset
};

/// Boundary weights for query j as a tape node depending on size and offset.
inline TapedWeights boundary_weights(std::size_t query, const Var& size, const Var& offset,
                                     std::size_t valid_length) {
  const double s = size.value().item();
  const double o = offset.value().item();
  TapedWeights out;
  out.decision = window_bounds(query, s, o, valid_length);
  out.values = boundary_weights(out.decision);
  const std::size_t n = out.values.size();
  Tensor w = Tensor::matrix(1, n);
  std::copy(out.values.weights.begin(), out.values.weights.end(), w.data());
  std::vector<WeightRule> rules = out.values.rules;
  out.weights = size.tape().record(
      std::move(w), {size.id(), offset.id()},
      [rules = std::move(rules)](const num::Tape&, const Tensor& g, std::span<Tensor* const> gin) {
        double d_left = 0.0, d_right = 0.0, d_anchor = 0.0;
        for (std::size_t k = 0; k < rules.size(); ++k) {
          const RuleSlope sl = rule_slope(rules[k]);
          d_left += g[k] * sl.left;
          d_right += g[k] * sl.right;
          d_anchor += g[k] * sl.anchor;
        }
        // left = A - s, right = A + s, A = j + o
        if (gin[0]) (*gin[0])[0] += d_right - d_left;
        if (gin[1]) (*gin[1])[0] += d_anchor + d_left + d_right;
      });
  return out;
}

}  // namespace dst::attn
