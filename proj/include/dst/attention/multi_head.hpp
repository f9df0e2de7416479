#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dst/attention/attend.hpp"
#include "dst/attention/decision_log.hpp"
#include "dst/attention/variant.hpp"
#include "dst/numcore/errors.hpp"
#include "dst/numcore/ops.hpp"

namespace dst::attn {

/// Learned attention parameters of one layer. Per-head projections are stored
/// side by side: head i of w_q is columns [i*head_dim, (i+1)*head_dim), and
/// head i of the decision matrix is rows [i*head_dim, (i+1)*head_dim).
struct AttentionParams {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  Tensor w_q;  // d_model x heads*head_dim
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;         // heads*head_dim x d_model
  Tensor w_decision;  // heads*head_dim x 2, deformable variants only
  Tensor w_sampler;   // heads*head_dim x max_points, DCN-like only

  std::size_t d_model() const { return w_q.rows(); }

  void validate() const {
    if (heads * head_dim != w_q.cols() || w_q.rows() != heads * head_dim) {
      throw DimensionError("attention params: heads * head_dim must equal d_model");
    }
    for (const Tensor* t : {&w_k, &w_v, &w_o}) {
      if (t->shape() != w_q.shape()) throw DimensionError("attention params: projection shapes differ");
    }
    if (!w_decision.empty() && (w_decision.rows() != heads * head_dim || w_decision.cols() != 2)) {
      throw DimensionError("attention params: decision matrix must be " +
                           std::to_string(heads * head_dim) + "x2");
    }
  }
};

// Tape handles for one layer's parameters.
struct AttentionVars {
  std::size_t heads = 1;
  Var w_q, w_k, w_v, w_o;
  std::optional<Var> steer;  // decision or sampler matrix
};

inline AttentionVars bind(num::Tape& tape, const AttentionParams& p, bool requires_grad) {
  AttentionVars v;
  v.heads = p.heads;
  v.w_q = tape.leaf(p.w_q, requires_grad);
  v.w_k = tape.leaf(p.w_k, requires_grad);
  v.w_v = tape.leaf(p.w_v, requires_grad);
  v.w_o = tape.leaf(p.w_o, requires_grad);
  if (!p.w_decision.empty())
    v.steer = tape.leaf(p.w_decision, requires_grad);
  else if (!p.w_sampler.empty())
    v.steer = tape.leaf(p.w_sampler, requires_grad);
  return v;
}

struct HeadProjection {
  Var q, k, v;
};

/// Per-head query/key/value projections of x (self-attention).
inline std::vector<HeadProjection> project_qkv(const Var& x, const AttentionVars& p) {
  if (x.value().rank() != 2 || x.value().cols() != p.w_q.value().rows()) {
    throw DimensionError("project_qkv: input " + num::shape_str(x.shape()) + " does not match W_Q " +
                         num::shape_str(p.w_q.shape()));
  }
  const Var q = num::matmul(x, p.w_q);
  const Var k = num::matmul(x, p.w_k);
  const Var v = num::matmul(x, p.w_v);
  const std::size_t dq = q.value().cols() / p.heads;
  std::vector<HeadProjection> out;
  for (std::size_t i = 0; i < p.heads; ++i) {
    out.push_back({num::slice_cols(q, i * dq, dq), num::slice_cols(k, i * dq, dq),
                   num::slice_cols(v, i * dq, dq)});
  }
  return out;
}

namespace detail {

inline Segment single_segment(const Var& q, std::size_t valid) {
  const std::size_t rows = q.value().rows();
  if (valid > rows) throw ContractError("attention: valid length exceeds sequence length");
  return Segment{0, rows, valid};
}

}  // namespace detail

/// Scaled dot-product attention of one head; keys at or beyond `valid` are
/// excluded and rows for those queries are zero.
inline Var full_attention(const Var& q, const Var& k, const Var& v, std::size_t valid) {
  const Segment seg = detail::single_segment(q, valid);
  AttentionContext ctx;
  ctx.variant = AttentionVariant::full();
  return attend(q, k, v, nullptr, std::span(&seg, 1), 1, ctx);
}

inline Var fixed_window_attention(const Var& q, const Var& k, const Var& v, double fraction,
                                  std::size_t valid) {
  const Segment seg = detail::single_segment(q, valid);
  AttentionContext ctx;
  ctx.variant = AttentionVariant::fixed_window(fraction);
  return attend(q, k, v, nullptr, std::span(&seg, 1), 1, ctx);
}

inline Var dcn_like_attention(const Var& q, const Var& k, const Var& v, const Var& sampler,
                              double fraction, std::size_t valid) {
  const Segment seg = detail::single_segment(q, valid);
  AttentionContext ctx;
  ctx.variant = AttentionVariant::dcn_like(fraction);
  return attend(q, k, v, &sampler, std::span(&seg, 1), 1, ctx);
}

struct DeformableOptions {
  std::optional<DecisionPins> pins;
  bool weight_values = false;
};

/// One deformable head: returns the output and every query's window decision.
inline std::pair<Var, std::vector<WindowDecision>> deformable_attention(
    const Var& q, const Var& k, const Var& v, const Var* decision_weights,
    const AttentionVariant& variant, std::size_t valid, const DeformableOptions& opts = {}) {
  if (!variant.is_deformable()) throw ContractError("deformable_attention: variant is not deformable");
  const Segment seg = detail::single_segment(q, valid);
  DecisionLog log(true, false);
  AttentionContext ctx;
  ctx.variant = variant;
  ctx.pins = opts.pins;
  ctx.weight_values = opts.weight_values;
  ctx.log = &log;
  Var out = attend(q, k, v, decision_weights, std::span(&seg, 1), 1, ctx);
  return {out, log.records()};
}

/// concat(head outputs) W_o over stacked segments.
inline Var multi_head(const Var& x, const AttentionVars& p, std::span<const Segment> segments,
                      const AttentionContext& ctx) {
  if (x.value().rank() != 2 || x.value().cols() != p.w_q.value().rows()) {
    throw DimensionError("multi_head: input " + num::shape_str(x.shape()) + " does not match W_Q " +
                         num::shape_str(p.w_q.shape()));
  }
  const Var q = num::matmul(x, p.w_q);
  const Var k = num::matmul(x, p.w_k);
  const Var v = num::matmul(x, p.w_v);
  const Var* steer = p.steer ? &*p.steer : nullptr;
  const AttentionKind kind = ctx.variant.kind();
  if (kind == AttentionKind::Full || kind == AttentionKind::FixedWindow) steer = nullptr;
  const Var heads = attend(q, k, v, steer, segments, p.heads, ctx);
  return num::matmul(heads, p.w_o);
}

inline Var multi_head(const Var& x, const AttentionVars& p, const AttentionVariant& variant,
                      std::size_t valid) {
  const Segment seg = detail::single_segment(x, valid);
  AttentionContext ctx;
  ctx.variant = variant;
  return multi_head(x, p, std::span(&seg, 1), ctx);
}

}  // namespace dst::attn
