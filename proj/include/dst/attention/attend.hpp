#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dst/attention/decision_log.hpp"
#include "dst/attention/geometry.hpp"
#include "dst/attention/variant.hpp"
#include "dst/numcore/errors.hpp"
#include "dst/numcore/kernels.hpp"
#include "dst/numcore/ops.hpp"
#include "dst/numcore/tape.hpp"

namespace dst::attn {

using num::NodeId;
using num::Segment;

/// Raw decision outputs to use verbatim for selected queries. A frozen query
/// passes no gradient into the decision path; gradient checks use this to set
/// aside queries sitting close to a floor/ceil discontinuity.
class FrozenDecisions {
 public:
  void freeze(std::size_t layer, std::size_t sample, std::size_t head, std::size_t query,
              double raw_size, double raw_offset) {
    entries_[{layer, sample, head, query}] = {raw_size, raw_offset};
  }

  const std::pair<double, double>* find(std::size_t layer, std::size_t sample, std::size_t head,
                                        std::size_t query) const {
    auto it = entries_.find({layer, sample, head, query});
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::array<std::size_t, 4>, std::pair<double, double>> entries_;
};

// True when a small change in the decision could move a floor/ceil (or, for
// a fallback singleton, the rounding of the anchor) past an integer.
inline bool near_kink(const WindowDecision& d, const DecisionPins& pins, double margin) {
  if (d.sampled_points || pins.all_pinned()) return false;
  if (kink_distance(d.left) < margin || kink_distance(d.right) < margin) return true;
  if (!pins.zero_offset && kink_distance(d.anchor) < margin) return true;
  return d.fallback && kink_distance(d.anchor + 0.5) < margin;
}

/// Freezes every recorded decision sitting within `margin` of a kink and
/// returns how many were frozen.
inline std::size_t freeze_near_kinks(std::span<const WindowDecision> decisions, const DecisionPins& pins,
                                     double margin, FrozenDecisions& frozen) {
  std::size_t n = 0;
  for (const auto& d : decisions) {
    if (!near_kink(d, pins, margin)) continue;
    frozen.freeze(d.layer, d.sample, d.head, d.query, d.raw_size, d.raw_offset);
    ++n;
  }
  return n;
}

struct AttentionContext {
  AttentionVariant variant;
  // Replaces variant.pins() when set.
  std::optional<DecisionPins> pins;
  // Also scale the selected value rows by the boundary weights.
  bool weight_values = false;
  std::size_t layer = 0;
  // Added to segment indices to give dataset-level sample ids.
  std::size_t sample_base = 0;
  DecisionLog* log = nullptr;
  const FrozenDecisions* frozen = nullptr;
};

namespace detail {

struct SpanQuery {
  std::size_t row = 0;
  std::size_t seg_offset = 0;
  std::size_t head = 0;
  std::size_t lo = 0;
  std::size_t hi = 0;
  std::size_t off = 0;
  // d size / d raw_size and d offset / d raw_offset; zero when pinned or frozen.
  double size_slope = 0.0;
  double offset_slope = 0.0;
  bool weighted = false;
};

// Queries sharing one (segment, head), stored contiguously.
struct SpanGroup {
  std::size_t seg_offset = 0;
  std::size_t valid = 0;
  std::size_t head = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct SpanCache {
  std::vector<SpanGroup> groups;
  std::vector<SpanQuery> queries;
  std::vector<double> probs;
  std::vector<double> dots;
  std::vector<double> weights;
  std::vector<WeightRule> rules;
};

struct SampleQuery {
  std::size_t row = 0;
  std::size_t head = 0;
  std::size_t seg_offset = 0;
  std::size_t valid = 0;
  std::size_t points = 0;
  std::size_t off = 0;
  double stride = 0.0;
};

struct SampleCache {
  std::vector<SampleQuery> queries;
  std::vector<double> probs;
  std::vector<double> frac;
  std::vector<std::size_t> base;  // floor of the clamped location
  std::vector<std::size_t> next;  // min(base + 1, valid - 1)
  std::vector<unsigned char> clamped;
};

inline void check_inputs(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                         std::span<const Segment> segments) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attend: Q/K/V shapes " + num::shape_str(q.shape()) + ", " +
                         num::shape_str(k.shape()) + ", " + num::shape_str(v.shape()) +
                         " must be equal matrices");
  }
  if (heads == 0 || q.cols() % heads != 0) {
    throw DimensionError("attend: " + std::to_string(q.cols()) + " features not divisible into " +
                         std::to_string(heads) + " heads");
  }
  for (const Segment& s : segments) {
    if (s.valid > s.rows || s.offset + s.rows > q.rows()) {
      throw ContractError("attend: segment out of range of " + num::shape_str(q.shape()));
    }
  }
}

}  // namespace detail

/// Multi-head attention over stacked sequences.
///
/// q, k, v are [rows x heads*head_dim]; head i owns columns
/// [i*head_dim, (i+1)*head_dim). Each segment is attended independently and
/// padded rows produce zero output. `steer` carries the per-head decision
/// matrices [heads*head_dim x 2] for deformable kinds or the sampler
/// matrices [heads*head_dim x max_points] for DcnLike, and may be null for
/// Full and FixedWindow.
inline Var attend(const Var& q, const Var& k, const Var& v, const Var* steer,
                  std::span<const Segment> segments, std::size_t heads, const AttentionContext& ctx) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::check_inputs(qv, kv, vv, heads, segments);
  const std::size_t width = qv.cols();
  const std::size_t dq = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dq));
  const AttentionKind kind = ctx.variant.kind();
  const DecisionPins pins = ctx.pins.value_or(ctx.variant.pins());
  const bool deformable = ctx.variant.is_deformable();
  DecisionLog* log = ctx.log;

  const Tensor* sv = steer ? &steer->value() : nullptr;
  if (deformable && !pins.all_pinned()) {
    if (!sv) throw ContractError("attend: deformable attention needs decision weights");
    if (sv->rank() != 2 || sv->rows() != width || sv->cols() != 2) {
      throw DimensionError("attend: decision weights " + num::shape_str(sv->shape()) +
                           " do not match " + std::to_string(width) + "x2");
    }
  }
  if (kind == AttentionKind::DcnLike) {
    if (!sv || sv->rank() != 2 || sv->rows() != width) {
      throw DimensionError("attend: DCN-like attention needs sampler weights with " +
                           std::to_string(width) + " rows");
    }
  }

  Tensor out = Tensor::matrix(qv.rows(), width);
  std::vector<NodeId> inputs{q.id(), k.id(), v.id()};
  if (steer) inputs.push_back(steer->id());
  std::vector<double> scratch;

  if (kind == AttentionKind::DcnLike) {
    auto cache = std::make_shared<detail::SampleCache>();
    const std::size_t max_points = sv->cols();
    for (std::size_t si = 0; si < segments.size(); ++si) {
      const Segment& seg = segments[si];
      const std::size_t valid = seg.valid;
      if (valid == 0) continue;
      const std::size_t n = dcn_point_count(ctx.variant.fraction(), valid);
      if (n > max_points) {
        throw DimensionError("attend: " + std::to_string(n) + " sampling points needed but sampler has " +
                             std::to_string(max_points) + " columns");
      }
      const double stride = static_cast<double>(valid) / static_cast<double>(n);
      const double last = static_cast<double>(valid - 1);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < valid; ++j) {
          const std::size_t row = seg.offset + j;
          const double* qr = qv.data() + row * width + h * dq;
          detail::SampleQuery sq{row, h, seg.offset, valid, n, cache->probs.size(), stride};
          scratch.assign(n, 0.0);
          std::size_t min_base = valid, max_next = 0;
          for (std::size_t m = 0; m < n; ++m) {
            double raw = 0.0;
            for (std::size_t c = 0; c < dq; ++c) raw += qr[c] * (*sv)(h * dq + c, m);
            double loc = dcn_reference(m, n, valid) + stride * raw;
            const bool clamped = loc < 0.0 || loc > last;
            loc = std::clamp(loc, 0.0, last);
            const std::size_t b = static_cast<std::size_t>(std::floor(loc));
            const std::size_t nx = std::min(b + 1, valid - 1);
            const double f = loc - static_cast<double>(b);
            const double* kb = kv.data() + (seg.offset + b) * width + h * dq;
            const double* kn = kv.data() + (seg.offset + nx) * width + h * dq;
            scratch[m] = ((1.0 - f) * num::kernels::dot(qr, kb, dq) + f * num::kernels::dot(qr, kn, dq)) * scale;
            cache->frac.push_back(f);
            cache->base.push_back(b);
            cache->next.push_back(nx);
            cache->clamped.push_back(clamped ? 1 : 0);
            min_base = std::min(min_base, b);
            max_next = std::max(max_next, nx);
          }
          num::softmax_inplace(scratch.data(), n);
          double* orow = out.data() + row * width + h * dq;
          for (std::size_t m = 0; m < n; ++m) {
            const std::size_t idx = sq.off + m;
            const double f = cache->frac[idx];
            const double* vb = vv.data() + (seg.offset + cache->base[idx]) * width + h * dq;
            const double* vn = vv.data() + (seg.offset + cache->next[idx]) * width + h * dq;
            num::kernels::axpy(scratch[m] * (1.0 - f), vb, orow, dq);
            num::kernels::axpy(scratch[m] * f, vn, orow, dq);
          }
          cache->probs.insert(cache->probs.end(), scratch.begin(), scratch.end());
          cache->queries.push_back(sq);
          if (log) {
            WindowDecision d;
            d.layer = ctx.layer;
            d.sample = ctx.sample_base + si;
            d.head = h;
            d.query = j;
            d.valid_length = valid;
            d.lo = min_base;
            d.hi = max_next;
            d.sampled_points = n;
            log->add(d);
            if (log->keep_traces()) {
              QueryTrace t;
              t.decision = d;
              for (std::size_t m = 0; m < n; ++m) {
                const std::size_t idx = sq.off + m;
                t.positions.push_back(static_cast<double>(cache->base[idx]) + cache->frac[idx]);
                t.weights.push_back(1.0);
              }
              t.attention = scratch;
              log->add_trace(std::move(t));
            }
          }
        }
      }
    }
    const NodeId iq = q.id(), ik = k.id(), iv = v.id(), is = steer->id();
    return q.tape().record(
        std::move(out), std::move(inputs),
        [cache, iq, ik, iv, is, width, dq, scale](const num::Tape& t, const Tensor& g,
                                                  std::span<Tensor* const> gin) {
          const Tensor& qv = t.value(iq);
          const Tensor& kv = t.value(ik);
          const Tensor& vv = t.value(iv);
          const Tensor& sv = t.value(is);
          const std::size_t ns = sv.cols();
          Tensor* gq = gin[0];
          Tensor* gk = gin[1];
          Tensor* gv = gin[2];
          Tensor* gs = gin[3];
          std::vector<double> da, dz;
          for (const auto& sq : cache->queries) {
            const std::size_t col = sq.head * dq;
            const double* qr = qv.data() + sq.row * width + col;
            const double* gr = g.data() + sq.row * width + col;
            const double* p = cache->probs.data() + sq.off;
            da.assign(sq.points, 0.0);
            dz.assign(sq.points, 0.0);
            double acc = 0.0;
            for (std::size_t m = 0; m < sq.points; ++m) {
              const std::size_t idx = sq.off + m;
              const double f = cache->frac[idx];
              const double* vb = vv.data() + (sq.seg_offset + cache->base[idx]) * width + col;
              const double* vn = vv.data() + (sq.seg_offset + cache->next[idx]) * width + col;
              da[m] = (1.0 - f) * num::kernels::dot(gr, vb, dq) + f * num::kernels::dot(gr, vn, dq);
              acc += p[m] * da[m];
            }
            for (std::size_t m = 0; m < sq.points; ++m) dz[m] = p[m] * (da[m] - acc);
            for (std::size_t m = 0; m < sq.points; ++m) {
              const std::size_t idx = sq.off + m;
              const double f = cache->frac[idx];
              const std::size_t rb = sq.seg_offset + cache->base[idx];
              const std::size_t rn = sq.seg_offset + cache->next[idx];
              const double* kb = kv.data() + rb * width + col;
              const double* kn = kv.data() + rn * width + col;
              const double* vb = vv.data() + rb * width + col;
              const double* vn = vv.data() + rn * width + col;
              const double dzs = dz[m] * scale;
              if (gq) {
                double* o = gq->data() + sq.row * width + col;
                num::kernels::axpy(dzs * (1.0 - f), kb, o, dq);
                num::kernels::axpy(dzs * f, kn, o, dq);
              }
              if (gk) {
                num::kernels::axpy(dzs * (1.0 - f), qr, gk->data() + rb * width + col, dq);
                num::kernels::axpy(dzs * f, qr, gk->data() + rn * width + col, dq);
              }
              if (gv) {
                num::kernels::axpy(p[m] * (1.0 - f), gr, gv->data() + rb * width + col, dq);
                num::kernels::axpy(p[m] * f, gr, gv->data() + rn * width + col, dq);
              }
              if (cache->clamped[idx]) continue;
              const double dloc = dzs * (num::kernels::dot(qr, kn, dq) - num::kernels::dot(qr, kb, dq)) +
                                  p[m] * (num::kernels::dot(gr, vn, dq) - num::kernels::dot(gr, vb, dq));
              const double draw = dloc * sq.stride;
              if (draw == 0.0) continue;
              for (std::size_t c = 0; c < dq; ++c) {
                if (gq) (*gq)(sq.row, col + c) += sv(col + c, m) * draw;
                if (gs) (*gs).data()[(col + c) * ns + m] += qr[c] * draw;
              }
            }
          }
        });
  }

  auto cache = std::make_shared<detail::SpanCache>();
  std::vector<double> kt, vh;
  BoundaryWeights bw;
  for (std::size_t si = 0; si < segments.size(); ++si) {
    const Segment& seg = segments[si];
    const std::size_t valid = seg.valid;
    if (valid == 0) continue;
    const double len = static_cast<double>(valid);
    for (std::size_t h = 0; h < heads; ++h) {
      // Head slices: K transposed so scores vectorize across keys, V by row.
      kt.resize(dq * valid);
      vh.resize(valid * dq);
      for (std::size_t t = 0; t < valid; ++t) {
        const double* kr = kv.data() + (seg.offset + t) * width + h * dq;
        const double* vr = vv.data() + (seg.offset + t) * width + h * dq;
        for (std::size_t c = 0; c < dq; ++c) kt[c * valid + t] = kr[c];
        std::copy(vr, vr + dq, vh.data() + t * dq);
      }
      cache->groups.push_back({seg.offset, valid, h, cache->queries.size(), 0});
      for (std::size_t j = 0; j < valid; ++j) {
        const std::size_t row = seg.offset + j;
        const double* qr = qv.data() + row * width + h * dq;
        detail::SpanQuery sq;
        sq.row = row;
        sq.seg_offset = seg.offset;
        sq.head = h;
        sq.off = cache->probs.size();
        WindowDecision d;
        if (deformable) {
          double raw_size = 0.0, raw_offset = 0.0;
          const auto* frozen = ctx.frozen
                                   ? ctx.frozen->find(ctx.layer, ctx.sample_base + si, h, j)
                                   : nullptr;
          if (frozen) {
            raw_size = frozen->first;
            raw_offset = frozen->second;
          } else if (sv) {
            for (std::size_t c = 0; c < dq; ++c) {
              raw_size += qr[c] * (*sv)(h * dq + c, 0);
              raw_offset += qr[c] * (*sv)(h * dq + c, 1);
            }
          }
          double size = 0.0, offset = 0.0;
          if (pins.size_fraction) {
            size = *pins.size_fraction * len;
          } else {
            const double sg = num::sigmoid_scalar(raw_size);
            size = sg * len;
            if (!frozen) sq.size_slope = len * sg * (1.0 - sg);
          }
          if (!pins.zero_offset) {
            const double th = std::tanh(raw_offset);
            offset = th * len;
            if (!frozen) sq.offset_slope = len * (1.0 - th * th);
          }
          d = window_bounds(j, size, offset, valid);
          d.raw_size = raw_size;
          d.raw_offset = raw_offset;
          bw = boundary_weights(d);
          sq.weighted = true;
        } else {
          d.query = j;
          d.valid_length = valid;
          if (kind == AttentionKind::FixedWindow) {
            std::tie(d.lo, d.hi) = fixed_window_span(j, ctx.variant.fraction(), valid);
          } else {
            d.lo = 0;
            d.hi = valid - 1;
          }
          d.anchor = static_cast<double>(j);
          d.left = static_cast<double>(d.lo);
          d.right = static_cast<double>(d.hi);
        }
        sq.lo = d.lo;
        sq.hi = d.hi;
        const std::size_t span = d.hi - d.lo + 1;
        if (sq.weighted) {
          cache->weights.insert(cache->weights.end(), bw.weights.begin(), bw.weights.end());
          cache->rules.insert(cache->rules.end(), bw.rules.begin(), bw.rules.end());
        } else {
          cache->weights.insert(cache->weights.end(), span, 1.0);
          cache->rules.insert(cache->rules.end(), span, WeightRule::None);
        }
        const double* w = cache->weights.data() + sq.off;
        cache->dots.resize(sq.off + span, 0.0);
        double* dots = cache->dots.data() + sq.off;
        for (std::size_t c = 0; c < dq; ++c) num::kernels::axpy(qr[c], kt.data() + c * valid + d.lo, dots, span);
        cache->probs.resize(sq.off + span);
        double* p = cache->probs.data() + sq.off;
        for (std::size_t t = 0; t < span; ++t) p[t] = w[t] * dots[t] * scale;
        num::softmax_inplace(p, span);
        double* orow = out.data() + row * width + h * dq;
        for (std::size_t t = 0; t < span; ++t) {
          const double a = ctx.weight_values ? p[t] * w[t] : p[t];
          num::kernels::axpy(a, vh.data() + (d.lo + t) * dq, orow, dq);
        }
        cache->queries.push_back(sq);
        if (log) {
          d.layer = ctx.layer;
          d.sample = ctx.sample_base + si;
          d.head = h;
          log->add(d);
          if (log->keep_traces()) {
            QueryTrace t;
            t.decision = d;
            for (std::size_t x = d.lo; x <= d.hi; ++x) t.positions.push_back(static_cast<double>(x));
            t.weights.assign(w, w + span);
            t.attention.assign(p, p + span);
            log->add_trace(std::move(t));
          }
        }
      }
      cache->groups.back().end = cache->queries.size();
    }
  }

  const NodeId iq = q.id(), ik = k.id(), iv = v.id();
  const NodeId is = steer ? steer->id() : 0;
  const bool has_steer = steer != nullptr;
  const bool weight_values = ctx.weight_values;
  return q.tape().record(
      std::move(out), std::move(inputs),
      [cache, iq, ik, iv, is, has_steer, weight_values, width, dq, scale](
          const num::Tape& t, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        const Tensor* sv = has_steer ? &t.value(is) : nullptr;
        Tensor* gq = gin[0];
        Tensor* gk = gin[1];
        Tensor* gv = gin[2];
        Tensor* gs = has_steer ? gin[3] : nullptr;
        std::vector<double> da, gvd, kh, vt, gkh, gvh;
        for (const auto& grp : cache->groups) {
          const std::size_t valid = grp.valid;
          const std::size_t col = grp.head * dq;
          kh.resize(valid * dq);
          vt.resize(dq * valid);
          gkh.assign(valid * dq, 0.0);
          gvh.assign(valid * dq, 0.0);
          for (std::size_t x = 0; x < valid; ++x) {
            const double* kr = kv.data() + (grp.seg_offset + x) * width + col;
            const double* vr = vv.data() + (grp.seg_offset + x) * width + col;
            std::copy(kr, kr + dq, kh.data() + x * dq);
            for (std::size_t c = 0; c < dq; ++c) vt[c * valid + x] = vr[c];
          }
          for (std::size_t qi = grp.begin; qi < grp.end; ++qi) {
            const auto& sq = cache->queries[qi];
            const std::size_t span = sq.hi - sq.lo + 1;
            const double* qr = qv.data() + sq.row * width + col;
            const double* gr = g.data() + sq.row * width + col;
            const double* p = cache->probs.data() + sq.off;
            const double* dots = cache->dots.data() + sq.off;
            const double* w = cache->weights.data() + sq.off;
            const WeightRule* rules = cache->rules.data() + sq.off;
            gvd.assign(span, 0.0);
            for (std::size_t c = 0; c < dq; ++c) num::kernels::axpy(gr[c], vt.data() + c * valid + sq.lo, gvd.data(), span);
            da.resize(span);
            double acc = 0.0;
            for (std::size_t x = 0; x < span; ++x) {
              da[x] = weight_values ? w[x] * gvd[x] : gvd[x];
              acc += p[x] * da[x];
            }
            double d_left = 0.0, d_right = 0.0, d_anchor = 0.0;
            double* gqr = gq ? gq->data() + sq.row * width + col : nullptr;
            for (std::size_t x = 0; x < span; ++x) {
              const std::size_t kr = sq.lo + x;
              const double dz = p[x] * (da[x] - acc);
              const double dzw = dz * w[x] * scale;
              if (gqr) num::kernels::axpy(dzw, kh.data() + kr * dq, gqr, dq);
              num::kernels::axpy(dzw, qr, gkh.data() + kr * dq, dq);
              num::kernels::axpy(weight_values ? p[x] * w[x] : p[x], gr, gvh.data() + kr * dq, dq);
              if (rules[x] != WeightRule::None) {
                double dw = dz * dots[x] * scale;
                if (weight_values) dw += p[x] * gvd[x];
                const RuleSlope sl = rule_slope(rules[x]);
                d_left += dw * sl.left;
                d_right += dw * sl.right;
                d_anchor += dw * sl.anchor;
              }
            }
            if (!sq.weighted || !sv) continue;
            // left = A - s, right = A + s, A = j + o
            const double d_raw_size = (d_right - d_left) * sq.size_slope;
            const double d_raw_offset = (d_anchor + d_left + d_right) * sq.offset_slope;
            if (d_raw_size == 0.0 && d_raw_offset == 0.0) continue;
            for (std::size_t c = 0; c < dq; ++c) {
              if (gqr) gqr[c] += (*sv)(col + c, 0) * d_raw_size + (*sv)(col + c, 1) * d_raw_offset;
              if (gs) {
                (*gs)(col + c, 0) += qr[c] * d_raw_size;
                (*gs)(col + c, 1) += qr[c] * d_raw_offset;
              }
            }
          }
          for (std::size_t x = 0; x < valid; ++x) {
            if (gk) num::kernels::axpy(1.0, gkh.data() + x * dq, gk->data() + (grp.seg_offset + x) * width + col, dq);
            if (gv) num::kernels::axpy(1.0, gvh.data() + x * dq, gv->data() + (grp.seg_offset + x) * width + col, dq);
          }
        }
      });
}

}  // namespace dst::attn
