#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dst/attention/multi_head.hpp"
#include "dst/model/config.hpp"
#include "dst/numcore/ops.hpp"

namespace dst::model {

using attn::AttentionParams;
using attn::DecisionLog;
using attn::FrozenDecisions;
using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;

struct DstBlockParams {
  AttentionParams attn;
  Tensor w1, b1;  // d x ffn, ffn
  Tensor w2, b2;  // ffn x d, d
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
};

struct DstModel {
  ModelConfig config;
  Tensor w_in, b_in;  // feature_dim x d, d
  std::vector<DstBlockParams> blocks;
  Tensor w_cls, b_cls;  // d x C, C
};

// Decision parameters take the scaled learning rate.
enum class ParamKind { Regular, Decision };

/// Calls f(name, tensor, kind) for every parameter in checkpoint order.
template <typename Model, typename F>
  requires std::is_same_v<std::remove_const_t<Model>, DstModel>
void visit_params(Model& m, F&& f) {
  f("input.weight", m.w_in, ParamKind::Regular);
  f("input.bias", m.b_in, ParamKind::Regular);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "attn.w_q", b.attn.w_q, ParamKind::Regular);
    f(p + "attn.w_k", b.attn.w_k, ParamKind::Regular);
    f(p + "attn.w_v", b.attn.w_v, ParamKind::Regular);
    f(p + "attn.w_o", b.attn.w_o, ParamKind::Regular);
    if (!b.attn.w_decision.empty()) f(p + "attn.w_decision", b.attn.w_decision, ParamKind::Decision);
    if (!b.attn.w_sampler.empty()) f(p + "attn.w_sampler", b.attn.w_sampler, ParamKind::Regular);
    f(p + "ln1.gain", b.ln1_gain, ParamKind::Regular);
    f(p + "ln1.bias", b.ln1_bias, ParamKind::Regular);
    f(p + "ffn.w1", b.w1, ParamKind::Regular);
    f(p + "ffn.b1", b.b1, ParamKind::Regular);
    f(p + "ffn.w2", b.w2, ParamKind::Regular);
    f(p + "ffn.b2", b.b2, ParamKind::Regular);
    f(p + "ln2.gain", b.ln2_gain, ParamKind::Regular);
    f(p + "ln2.bias", b.ln2_bias, ParamKind::Regular);
  }
  f("classifier.weight", m.w_cls, ParamKind::Regular);
  f("classifier.bias", m.b_cls, ParamKind::Regular);
}

inline std::size_t parameter_count(const DstModel& m) {
  std::size_t n = 0;
  visit_params(m, [&](const std::string&, const Tensor& t, ParamKind) { n += t.size(); });
  return n;
}

namespace detail {

inline Tensor uniform_matrix(std::size_t r, std::size_t c, double bound, std::mt19937_64& rng) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& x : t.storage()) x = bound * (2.0 * num::uniform01(rng) - 1.0);
  return t;
}

// Fan-in scaled uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return uniform_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

inline Tensor vec(std::size_t n, double fill) { return Tensor(num::Shape{n}, fill); }

}  // namespace detail

/// Deterministic initialization from a seed.
inline DstModel init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model, ffn = config.ffn_dim();
  DstModel m;
  m.config = config;
  m.w_in = detail::linear(config.feature_dim, d, rng);
  m.b_in = detail::vec(d, 0.0);
  const auto kind = config.variant.kind();
  for (std::size_t i = 0; i < config.blocks; ++i) {
    DstBlockParams b;
    b.attn.heads = config.heads;
    b.attn.head_dim = config.head_dim();
    b.attn.w_q = detail::linear(d, d, rng);
    b.attn.w_k = detail::linear(d, d, rng);
    b.attn.w_v = detail::linear(d, d, rng);
    b.attn.w_o = detail::linear(d, d, rng);
    if (config.variant.is_deformable()) {
      b.attn.w_decision = detail::uniform_matrix(d, 2, config.decision_init_scale * std::sqrt(3.0), rng);
    } else if (kind == attn::AttentionKind::DcnLike) {
      b.attn.w_sampler =
          detail::uniform_matrix(d, config.sampler_points(), config.decision_init_scale * std::sqrt(3.0), rng);
    }
    b.ln1_gain = detail::vec(d, 1.0);
    b.ln1_bias = detail::vec(d, 0.0);
    b.w1 = detail::linear(d, ffn, rng);
    b.b1 = detail::vec(ffn, 0.0);
    b.w2 = detail::linear(ffn, d, rng);
    b.b2 = detail::vec(d, 0.0);
    b.ln2_gain = detail::vec(d, 1.0);
    b.ln2_bias = detail::vec(d, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.w_cls = detail::linear(d, config.classes, rng);
  m.b_cls = detail::vec(config.classes, 0.0);
  return m;
}

struct BoundBlock {
  attn::AttentionVars attn;
  Var w1, b1, w2, b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

/// Tape leaves for every parameter; `params` follows visit_params order.
struct BoundModel {
  const DstModel* model = nullptr;
  Var w_in, b_in;
  std::vector<BoundBlock> blocks;
  Var w_cls, b_cls;
  std::vector<Var> params;
};

inline BoundModel bind(Tape& tape, const DstModel& m, bool requires_grad = true) {
  BoundModel b;
  b.model = &m;
  std::vector<Var> all;
  visit_params(m, [&](const std::string&, const Tensor& t, ParamKind) { all.push_back(tape.leaf(t, requires_grad)); });
  b.params = all;
  std::size_t i = 0;
  b.w_in = all[i++];
  b.b_in = all[i++];
  for (const auto& blk : m.blocks) {
    BoundBlock bb;
    bb.attn.heads = blk.attn.heads;
    bb.attn.w_q = all[i++];
    bb.attn.w_k = all[i++];
    bb.attn.w_v = all[i++];
    bb.attn.w_o = all[i++];
    if (!blk.attn.w_decision.empty() || !blk.attn.w_sampler.empty()) bb.attn.steer = all[i++];
    bb.ln1_gain = all[i++];
    bb.ln1_bias = all[i++];
    bb.w1 = all[i++];
    bb.b1 = all[i++];
    bb.w2 = all[i++];
    bb.b2 = all[i++];
    bb.ln2_gain = all[i++];
    bb.ln2_bias = all[i++];
    b.blocks.push_back(std::move(bb));
  }
  b.w_cls = all[i++];
  b.b_cls = all[i++];
  return b;
}

/// Feed-forward activation patterns, one [rows x ffn] 0/1 mask per block.
/// Recording stores them; replaying multiplies by the stored mask instead of
/// applying ReLU, which pins every unit to its recorded side of zero.
struct ActivationMasks {
  bool record = true;
  std::vector<Tensor> masks;
};

struct ForwardOptions {
  bool train = false;            // enables dropout
  std::mt19937_64* rng = nullptr;  // dropout stream, required when training with dropout
  DecisionLog* log = nullptr;
  const FrozenDecisions* frozen = nullptr;
  ActivationMasks* activations = nullptr;
  std::size_t sample_base = 0;
};

inline Tensor sinusoidal_encoding(std::size_t rows, std::size_t d) {
  Tensor pe = Tensor::matrix(rows, d);
  for (std::size_t p = 0; p < rows; ++p)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(p, i) = (i % 2 == 0) ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
    }
  return pe;
}

inline Var maybe_dropout(const Var& x, const ModelConfig& c, const ForwardOptions& o) {
  if (!o.train || c.dropout <= 0.0) return x;
  if (!o.rng) throw ContractError("forward: training with dropout needs a random stream");
  return num::dropout(x, c.dropout, *o.rng);
}

/// One DST block over stacked segments: y = LN(x + Attn(x)), z = LN(y + FFN(y)).
inline Var block_forward(const Var& x, const BoundBlock& b, const ModelConfig& c, std::size_t layer,
                         std::span<const Segment> segments, const ForwardOptions& o) {
  attn::AttentionContext ctx;
  ctx.variant = c.variant;
  ctx.weight_values = c.weight_values;
  ctx.layer = layer;
  ctx.sample_base = o.sample_base;
  ctx.log = o.log;
  ctx.frozen = o.frozen;
  const Var a = maybe_dropout(attn::multi_head(x, b.attn, segments, ctx), c, o);
  const Var y = num::layer_norm(num::add(x, a), b.ln1_gain, b.ln1_bias);
  const Var z = num::add_bias(num::matmul(y, b.w1), b.b1);
  Var h = num::relu(z);
  if (o.activations && o.activations->record) {
    Tensor mask = z.value();
    for (double& v : mask.values()) v = v > 0.0 ? 1.0 : 0.0;
    o.activations->masks.push_back(std::move(mask));
  } else if (o.activations) {
    if (layer >= o.activations->masks.size() || o.activations->masks[layer].shape() != z.value().shape())
      throw ContractError("forward: no recorded activation mask matches block " + std::to_string(layer));
    h = num::hadamard(z, z.tape().constant(o.activations->masks[layer]));
  }
  const Var f = maybe_dropout(num::add_bias(num::matmul(h, b.w2), b.b2), c, o);
  return num::layer_norm(num::add(y, f), b.ln2_gain, b.ln2_bias);
}

/// Logits [segments x C] for stacked inputs [rows x feature_dim].
inline Var forward(const BoundModel& bm, const Tensor& features, std::span<const Segment> segments,
                   const ForwardOptions& o = {}) {
  const ModelConfig& c = bm.model->config;
  if (features.rank() != 2 || features.cols() != c.feature_dim) {
    throw DimensionError("forward: features " + num::shape_str(features.shape()) + " but model expects " +
                         std::to_string(c.feature_dim) + " columns");
  }
  for (const Segment& s : segments) {
    if (s.valid > c.max_length) {
      throw LengthError("forward: sequence of length " + std::to_string(s.valid) + " exceeds max_length " +
                        std::to_string(c.max_length));
    }
    if (s.valid == 0) throw ContractError("forward: empty sequence");
  }
  Tape& tape = bm.w_in.tape();
  Var h = num::add_bias(num::matmul(tape.constant(features), bm.w_in), bm.b_in);
  if (c.positional_encoding) {
    std::size_t longest = 0;
    for (const Segment& s : segments) longest = std::max(longest, s.rows);
    const Tensor pe = sinusoidal_encoding(longest, c.d_model);
    Tensor add = Tensor::matrix(features.rows(), c.d_model);
    for (const Segment& s : segments)
      for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t i = 0; i < c.d_model; ++i) add(s.offset + r, i) = pe(r, i);
    h = num::add(h, tape.constant(std::move(add)));
  }
  for (std::size_t l = 0; l < bm.blocks.size(); ++l) h = block_forward(h, bm.blocks[l], c, l, segments, o);
  return num::add_bias(num::matmul(num::segment_mean(h, segments), bm.w_cls), bm.b_cls);
}

/// Single sequence: rows at or beyond `valid` are padding.
inline Var forward(const BoundModel& bm, const Tensor& features, std::size_t valid, const ForwardOptions& o = {}) {
  if (features.rows() > bm.model->config.max_length) {
    throw LengthError("forward: input of " + std::to_string(features.rows()) + " frames exceeds max_length " +
                      std::to_string(bm.model->config.max_length));
  }
  if (valid > features.rows()) throw ContractError("forward: valid length exceeds input length");
  const Segment seg{0, features.rows(), valid};
  return forward(bm, features, std::span(&seg, 1), o);
}

}  // namespace dst::model
