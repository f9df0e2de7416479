#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dst/attention/multi_head.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dst;
using namespace dst::attn;
using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;
using dst::testing::max_abs_diff;
using dst::testing::numeric_grad;
using dst::testing::random_matrix;
using dst::testing::rel_error;

namespace {

Var run(Tape& t, const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* steer, std::size_t heads,
        std::size_t valid, AttentionContext ctx) {
  Var qs = t.leaf(q), ks = t.leaf(k), vs = t.leaf(v);
  const Segment seg{0, q.rows(), valid};
  if (steer) {
    Var s = t.leaf(*steer);
    return attend(qs, ks, vs, &s, std::span(&seg, 1), heads, ctx);
  }
  return attend(qs, ks, vs, nullptr, std::span(&seg, 1), heads, ctx);
}

AttentionContext ctx_for(const AttentionVariant& v) {
  AttentionContext c;
  c.variant = v;
  return c;
}

}  // namespace

TEST(ProjectQkv, IdentityGivesSlices) {
  std::mt19937_64 rng(1);
  Tape t;
  const Tensor x0 = random_matrix(5, 6, rng);
  AttentionParams p{3, 2, Tensor::identity(6), Tensor::identity(6), Tensor::identity(6), Tensor::identity(6), {}, {}};
  auto vars = bind(t, p, false);
  auto heads = project_qkv(t.leaf(x0), vars);
  ASSERT_EQ(heads.size(), 3u);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_EQ(heads[h].q.value()(r, c), x0(r, h * 2 + c));
        EXPECT_EQ(heads[h].k.value()(r, c), x0(r, h * 2 + c));
      }
}

TEST(ProjectQkv, ZeroInputAndShapes) {
  std::mt19937_64 rng(2);
  Tape t;
  AttentionParams p{4, 2, random_matrix(8, 8, rng), random_matrix(8, 8, rng), random_matrix(8, 8, rng),
                    random_matrix(8, 8, rng), {}, {}};
  auto vars = bind(t, p, false);
  auto heads = project_qkv(t.leaf(Tensor::matrix(3, 8)), vars);
  for (auto& h : heads) {
    EXPECT_EQ(h.q.value().cols(), 2u);
    for (double x : h.v.value().values()) EXPECT_EQ(x, 0.0);
  }
  EXPECT_THROW(project_qkv(t.leaf(Tensor::matrix(3, 7)), vars), DimensionError);
}

TEST(FullAttention, SingleTokenReturnsValue) {
  Tape t;
  Var v = t.leaf(Tensor::matrix({{0.3, -2.0}}));
  Var out = full_attention(t.leaf(Tensor::matrix({{1, 2}})), t.leaf(Tensor::matrix({{4, 1}})), v, 1);
  EXPECT_EQ(out.value(), v.value());
}

TEST(FullAttention, EqualKeysAverageValidValues) {
  std::mt19937_64 rng(3);
  Tape t;
  const Tensor v = random_matrix(6, 3, rng);
  Var out = full_attention(t.leaf(random_matrix(6, 3, rng)), t.leaf(Tensor::matrix(6, 3, 0.5)), t.leaf(v), 4);
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = (v(0, c) + v(1, c) + v(2, c) + v(3, c)) / 4.0;
    for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(out.value()(r, c), mean, 1e-12);
    EXPECT_EQ(out.value()(4, c), 0.0);
    EXPECT_EQ(out.value()(5, c), 0.0);
  }
}

TEST(FullAttention, MatchesNaiveLoop) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 3 + trial % 10, valid = 1 + trial % L;
    const Tensor q = random_matrix(L, 4, rng), k = random_matrix(L, 4, rng), v = random_matrix(L, 4, rng);
    Tape t;
    const Tensor got = run(t, q, k, v, nullptr, 2, valid, ctx_for(AttentionVariant::full())).value();
    EXPECT_LT(max_abs_diff(got, oracle::full(q, k, v, 2, valid)), 1e-12);
  }
}

TEST(FixedWindow, FullFractionReducesToFull) {
  std::mt19937_64 rng(5);
  const Tensor q = random_matrix(11, 4, rng), k = random_matrix(11, 4, rng), v = random_matrix(11, 4, rng);
  Tape t;
  const Tensor w = fixed_window_attention(t.leaf(q), t.leaf(k), t.leaf(v), 1.0, 9).value();
  const Tensor f = full_attention(t.leaf(q), t.leaf(k), t.leaf(v), 9).value();
  EXPECT_LT(max_abs_diff(w, f), 1e-12);
}

TEST(FixedWindow, SingletonReturnsOwnValue) {
  std::mt19937_64 rng(6);
  const Tensor q = random_matrix(12, 3, rng), k = random_matrix(12, 3, rng), v = random_matrix(12, 3, rng);
  Tape t;
  const Tensor out = fixed_window_attention(t.leaf(q), t.leaf(k), t.leaf(v), 0.01, 12).value();
  EXPECT_EQ(out, v);
}

TEST(FixedWindow, MatchesNaiveLoop) {
  std::mt19937_64 rng(7);
  for (double f : {0.1, 0.25, 0.5, 0.77}) {
    const Tensor q = random_matrix(16, 4, rng), k = random_matrix(16, 4, rng), v = random_matrix(16, 4, rng);
    Tape t;
    const Tensor got = run(t, q, k, v, nullptr, 2, 14, ctx_for(AttentionVariant::fixed_window(f))).value();
    EXPECT_LT(max_abs_diff(got, oracle::window(q, k, v, 2, 14, f)), 1e-12) << f;
  }
}

TEST(FixedWindow, SpanWidthIsConstant) {
  for (std::size_t L : {1u, 7u, 64u, 100u, 128u})
    for (std::size_t j = 0; j < L; ++j) {
      auto [lo, hi] = fixed_window_span(j, 0.1, L);
      EXPECT_LE(hi, L - 1);
      EXPECT_EQ(hi - lo + 1, std::max<std::size_t>(1, std::llround(0.1 * L)));
      EXPECT_TRUE(lo <= j && j <= hi);
    }
}

TEST(DcnLike, IntegerGridReducesToFull) {
  std::mt19937_64 rng(8);
  const std::size_t L = 9;
  const Tensor q = random_matrix(L, 4, rng), k = random_matrix(L, 4, rng), v = random_matrix(L, 4, rng);
  const Tensor sampler = Tensor::matrix(4, L);
  Tape t;
  const Tensor got = dcn_like_attention(t.leaf(q), t.leaf(k), t.leaf(v), t.leaf(sampler), 1.0, L).value();
  EXPECT_LT(max_abs_diff(got, oracle::full(q, k, v, 1, L)), 1e-9);
}

TEST(DcnLike, InterpolationIdentities) {
  std::mt19937_64 rng(9);
  const Tensor k = random_matrix(4, 2, rng), v = random_matrix(4, 2, rng);
  const Tensor q = Tensor::matrix(4, 2, 1.0);
  // one point, reference 1.5, stride 4: raw r moves it to 1.5 + 4 r
  auto sampled = [&](double loc) {
    Tensor s = Tensor::matrix(2, 1);
    s(0, 0) = (loc - 1.5) / 4.0;
    Tape t;
    return dcn_like_attention(t.leaf(q), t.leaf(k), t.leaf(v), t.leaf(s), 0.25, 4).value();
  };
  const Tensor at2 = sampled(2.0);
  EXPECT_NEAR(at2(0, 0), v(2, 0), 1e-12);
  EXPECT_NEAR(at2(0, 1), v(2, 1), 1e-12);
  const Tensor at225 = sampled(2.25);
  EXPECT_NEAR(at225(1, 0), 0.75 * v(2, 0) + 0.25 * v(3, 0), 1e-12);
  EXPECT_NEAR(at225(1, 1), 0.75 * v(2, 1) + 0.25 * v(3, 1), 1e-12);
}

TEST(DcnLike, MatchesNaiveLoop) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 8 + trial % 9, valid = 4 + trial % (L - 3);
    const double f = 0.2 + 0.05 * (trial % 10);
    const Tensor q = random_matrix(L, 6, rng), k = random_matrix(L, 6, rng), v = random_matrix(L, 6, rng);
    const Tensor s = random_matrix(6, L, rng, 0.5);
    Tape t;
    const Tensor got = run(t, q, k, v, &s, 2, valid, ctx_for(AttentionVariant::dcn_like(f))).value();
    EXPECT_LT(max_abs_diff(got, oracle::dcn(q, k, v, s, 2, valid, f)), 1e-12);
  }
}

TEST(DcnLike, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::size_t L = 10;
  const Tensor q0 = random_matrix(L, 4, rng), k0 = random_matrix(L, 4, rng), v0 = random_matrix(L, 4, rng);
  const Tensor s0 = random_matrix(4, L, rng, 0.3), w = random_matrix(L, 4, rng);
  auto loss = [&](const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& s) {
    Tape t;
    return num::sum(num::hadamard(run(t, q, k, v, &s, 2, 9, ctx_for(AttentionVariant::dcn_like(0.4))),
                                  t.constant(w)))
        .value()
        .item();
  };
  Tape t;
  Var q = t.leaf(q0), k = t.leaf(k0), v = t.leaf(v0), s = t.leaf(s0);
  const Segment seg{0, L, 9};
  auto g = t.backward(num::sum(num::hadamard(
      attend(q, k, v, &s, std::span(&seg, 1), 2, ctx_for(AttentionVariant::dcn_like(0.4))), t.constant(w))));
  EXPECT_LT(rel_error(g.at(q), numeric_grad([&](const Tensor& x) { return loss(x, k0, v0, s0); }, q0)), 1e-6);
  EXPECT_LT(rel_error(g.at(k), numeric_grad([&](const Tensor& x) { return loss(q0, x, v0, s0); }, k0)), 1e-6);
  EXPECT_LT(rel_error(g.at(v), numeric_grad([&](const Tensor& x) { return loss(q0, k0, x, s0); }, v0)), 1e-6);
  EXPECT_LT(rel_error(g.at(s), numeric_grad([&](const Tensor& x) { return loss(q0, k0, v0, x); }, s0)), 1e-6);
}

TEST(DecideWindow, KnownValues) {
  Tape t;
  auto at = [&](double rs, double ro, std::size_t L) {
    // q = [1, 1] with W = [[rs, 0], [0, ro]] gives raw = (rs, ro)
    Var q = t.leaf(Tensor::matrix({{1, 1}}));
    Var w = t.leaf(Tensor::matrix({{rs, 0}, {0, ro}}));
    auto [s, o] = decide_window(q, w, L);
    return std::pair{s.value().item(), o.value().item()};
  };
  auto [s0, o0] = at(0, 0, 100);
  EXPECT_DOUBLE_EQ(s0, 50.0);
  EXPECT_DOUBLE_EQ(o0, 0.0);
  EXPECT_NEAR(at(40, 0, 100).first, 100.0, 1e-9);
  auto [s1, o1] = at(0.8473, -0.5493, 100);
  EXPECT_NEAR(s1, 70.0, 0.01);
  EXPECT_NEAR(o1, -50.0, 0.01);
}

TEST(WindowBounds, Examples) {
  const WindowDecision a = window_bounds(3, 2.3, 1.5, 40);
  EXPECT_DOUBLE_EQ(a.anchor, 4.5);
  EXPECT_NEAR(a.left, 2.2, 1e-12);
  EXPECT_NEAR(a.right, 6.8, 1e-12);
  EXPECT_EQ(a.lo, 2u);
  EXPECT_EQ(a.hi, 7u);

  const WindowDecision b = window_bounds(17, 40, 0, 40);
  EXPECT_EQ(b.lo, 0u);
  EXPECT_EQ(b.hi, 39u);

  const WindowDecision c = window_bounds(0, 1, -50, 40);
  EXPECT_TRUE(c.fallback);
  EXPECT_EQ(c.lo, 0u);
  EXPECT_EQ(c.hi, 0u);
}

TEST(BoundaryWeights, HandEvaluation) {
  const BoundaryWeights w = boundary_weights(window_bounds(3, 2.3, 1.5, 40));
  EXPECT_NEAR(w.at(2), 0.8, 1e-12);
  EXPECT_NEAR(w.at(7), 0.8, 1e-12);
  EXPECT_NEAR(w.at(4), 1.5, 1e-12);
  EXPECT_NEAR(w.at(5), 1.5, 1e-12);
  EXPECT_EQ(w.at(3), 1.0);
  EXPECT_EQ(w.at(6), 1.0);
}

TEST(BoundaryWeights, IntegerAnchor) {
  const BoundaryWeights w = boundary_weights(window_bounds(5, 0.1, 0.0, 40));
  EXPECT_NEAR(w.at(4), 0.1, 1e-12);
  EXPECT_NEAR(w.at(6), 0.1, 1e-12);
  EXPECT_EQ(w.at(5), 1.0);
}

TEST(BoundaryWeights, FirstMatchWinsOnCollision) {
  const WindowDecision d = window_bounds(5, 0.5, 0.3, 40);
  const BoundaryWeights w = boundary_weights(d);
  EXPECT_EQ(w.rule_at(6), WeightRule::Right);
  EXPECT_NEAR(w.at(6), 0.8, 1e-12);
  EXPECT_NEAR(w.at(4), 0.2, 1e-12);
  EXPECT_NEAR(w.at(5), 1.7, 1e-12);
}

TEST(BoundaryWeights, ClampedEdgesKeepUnitWeight) {
  const BoundaryWeights w = boundary_weights(window_bounds(1, 3.4, 0.0, 5));
  EXPECT_EQ(w.lo, 0u);
  EXPECT_EQ(w.hi, 4u);
  EXPECT_EQ(w.at(0), 1.0);
  EXPECT_EQ(w.at(4), 1.0);
}

TEST(BoundaryWeights, RangesAndSpansOnRandomDecisions) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t L = 1 + rng() % 64, j = rng() % L;
    const double len = double(L);
    const WindowDecision d = window_bounds(j, len / (1 + std::exp(-u(rng))), std::tanh(u(rng)) * len, L);
    ASSERT_LE(d.lo, d.hi);
    ASSERT_LT(d.hi, L);
    const BoundaryWeights w = boundary_weights(d);
    for (std::size_t x = 0; x < w.size(); ++x) {
      switch (w.rules[x]) {
        case WeightRule::Left:
        case WeightRule::Right:
          ASSERT_GT(w.weights[x], 0.0);
          ASSERT_LE(w.weights[x], 1.0);
          break;
        case WeightRule::AnchorFloor:
        case WeightRule::AnchorCeil:
          ASSERT_GE(w.weights[x], 1.0);
          ASSERT_LT(w.weights[x], 2.0);
          break;
        case WeightRule::None: ASSERT_EQ(w.weights[x], 1.0);
      }
    }
  }
}

TEST(BoundaryWeights, TapedGradientFlowsToSizeAndOffset) {
  Tape t;
  Var s = t.leaf(Tensor::scalar(2.3));
  Var o = t.leaf(Tensor::scalar(1.5));
  auto tw = boundary_weights(3, s, o, 40);
  auto g = t.backward(num::sum(tw.weights));
  // w2 = 1-(L-2), w7 = 1-(7-R), w4 = 1+(5-A), w5 = 1+(A-4)
  // d/ds: +1 +1 = 2; d/do: -1 +1 -1 +1 = 0
  EXPECT_NEAR(g.at(s).item(), 2.0, 1e-12);
  EXPECT_NEAR(g.at(o).item(), 0.0, 1e-12);
}

TEST(Deformable, PinnedFullWindowReducesToFull) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t L = 2 + trial, valid = 1 + trial;
    const Tensor q = random_matrix(L, 4, rng), k = random_matrix(L, 4, rng), v = random_matrix(L, 4, rng);
    Tape t;
    auto [out, decisions] = deformable_attention(t.leaf(q), t.leaf(k), t.leaf(v), nullptr,
                                                 AttentionVariant::deformable(), valid,
                                                 {DecisionPins{1.0, true}, false});
    EXPECT_LT(max_abs_diff(out.value(), oracle::full(q, k, v, 1, valid)), 1e-9);
    EXPECT_EQ(decisions.size(), valid);
  }
}

TEST(Deformable, SingletonSpanReturnsValueRow) {
  std::mt19937_64 rng(14);
  // every window is pushed off the left edge, so each query sees token 0 only
  const Tensor q = Tensor::matrix(6, 2, 1.0), k = random_matrix(6, 2, rng), v = random_matrix(6, 2, rng);
  Tape t;
  Var wd = t.leaf(Tensor::matrix({{-40, -40}, {0, 0}}));
  auto [out, decisions] =
      deformable_attention(t.leaf(q), t.leaf(k), t.leaf(v), &wd, AttentionVariant::deformable(), 6);
  for (const auto& d : decisions) {
    EXPECT_EQ(d.lo, 0u);
    EXPECT_EQ(d.hi, 0u);
  }
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out.value()(r, c), v(0, c), 1e-15);
}

TEST(Deformable, MatchesNaiveLoop) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t heads = 1 + trial % 4, dq = 2 + trial % 3, L = 8, valid = 3 + trial % 6;
    const Tensor q = random_matrix(L, heads * dq, rng), k = random_matrix(L, heads * dq, rng),
                 v = random_matrix(L, heads * dq, rng), wd = random_matrix(heads * dq, 2, rng, 0.7);
    for (const AttentionVariant& var : {AttentionVariant::deformable(), AttentionVariant::deformable_fixed_size(),
                                        AttentionVariant::deformable_zero_offset()}) {
      for (bool wv : {false, true}) {
        Tape t;
        AttentionContext ctx = ctx_for(var);
        ctx.weight_values = wv;
        const Tensor got = run(t, q, k, v, &wd, heads, valid, ctx).value();
        oracle::Pins pins{var.pins().size_fraction, var.pins().zero_offset};
        EXPECT_LT(max_abs_diff(got, oracle::deformable(q, k, v, wd, heads, valid, pins, wv)), 1e-12)
            << var.name() << " " << wv;
      }
    }
  }
}

TEST(Deformable, PaddedRowsAreZero) {
  std::mt19937_64 rng(16);
  const Tensor q = random_matrix(10, 4, rng), k = random_matrix(10, 4, rng), v = random_matrix(10, 4, rng),
               wd = random_matrix(4, 2, rng);
  for (const AttentionVariant& var : {AttentionVariant::full(), AttentionVariant::fixed_window(0.3),
                                      AttentionVariant::deformable()}) {
    Tape t;
    const Tensor out = run(t, q, k, v, &wd, 2, 6, ctx_for(var)).value();
    for (std::size_t r = 6; r < 10; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(r, c), 0.0);
  }
  // padded keys never influence valid rows
  Tensor v2 = v;
  for (std::size_t c = 0; c < 4; ++c) v2(8, c) = 1e6;
  Tape t;
  EXPECT_EQ(run(t, q, k, v, &wd, 2, 6, ctx_for(AttentionVariant::deformable())).value(),
            run(t, q, k, v2, &wd, 2, 6, ctx_for(AttentionVariant::deformable())).value());
}

TEST(Deformable, GradientsMatchFiniteDifferencesAwayFromKinks) {
  std::mt19937_64 rng(17);
  int checked_queries = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t L = 12, valid = 11, heads = 2, dq = 3;
    const Tensor q0 = random_matrix(L, heads * dq, rng), k0 = random_matrix(L, heads * dq, rng),
                 v0 = random_matrix(L, heads * dq, rng), wd0 = random_matrix(heads * dq, 2, rng, 0.5),
                 w = random_matrix(L, heads * dq, rng);
    AttentionContext ctx = ctx_for(AttentionVariant::deformable());
    ctx.weight_values = trial % 2 == 1;
    DecisionLog log;
    {
      Tape t;
      AttentionContext c = ctx;
      c.log = &log;
      run(t, q0, k0, v0, &wd0, heads, valid, c);
    }
    FrozenDecisions frozen;
    const std::size_t excluded = freeze_near_kinks(log.records(), DecisionPins{}, 0.2, frozen);
    checked_queries += int(log.records().size() - excluded);
    ctx.frozen = &frozen;
    auto loss = [&](const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wd) {
      Tape t;
      return num::sum(num::hadamard(run(t, q, k, v, &wd, heads, valid, ctx), t.constant(w))).value().item();
    };
    Tape t;
    Var q = t.leaf(q0), k = t.leaf(k0), v = t.leaf(v0), wd = t.leaf(wd0);
    const Segment seg{0, L, valid};
    auto g = t.backward(num::sum(num::hadamard(attend(q, k, v, &wd, std::span(&seg, 1), heads, ctx), t.constant(w))));
    EXPECT_LT(rel_error(g.at(q), numeric_grad([&](const Tensor& x) { return loss(x, k0, v0, wd0); }, q0)), 1e-6);
    EXPECT_LT(rel_error(g.at(k), numeric_grad([&](const Tensor& x) { return loss(q0, x, v0, wd0); }, k0)), 1e-6);
    EXPECT_LT(rel_error(g.at(v), numeric_grad([&](const Tensor& x) { return loss(q0, k0, x, wd0); }, v0)), 1e-6);
    const Tensor gwd = numeric_grad([&](const Tensor& x) { return loss(q0, k0, v0, x); }, wd0);
    EXPECT_LT(rel_error(g.at(wd), gwd), 1e-4);
    if (excluded < log.records().size()) {
      double mag = 0.0;
      for (double x : g.at(wd).values()) mag = std::max(mag, std::abs(x));
      EXPECT_GT(mag, 0.0);
    }
  }
  EXPECT_GT(checked_queries, 0);
}

TEST(Deformable, QueryExactlyOnKinkIsFrozen) {
  WindowDecision d = window_bounds(5, 2.0, 0.0, 20);  // L = 3, R = 7, A = 5
  EXPECT_TRUE(near_kink(d, DecisionPins{}, 0.2));
  d = window_bounds(5, 2.5, 0.3, 20);
  EXPECT_FALSE(near_kink(d, DecisionPins{}, 0.2));
  EXPECT_FALSE(near_kink(window_bounds(5, 2.0, 0.0, 20), DecisionPins{0.1, true}, 0.2));
}

TEST(Deformable, PinsFixSizeAndOffset) {
  std::mt19937_64 rng(18);
  const Tensor q = random_matrix(40, 4, rng), k = random_matrix(40, 4, rng), v = random_matrix(40, 4, rng),
               wd = random_matrix(4, 2, rng, 3.0);
  DecisionLog log;
  AttentionContext ctx = ctx_for(AttentionVariant::deformable_fixed_size(0.05));
  ctx.log = &log;
  Tape t;
  run(t, q, k, v, &wd, 1, 40, ctx);
  for (const auto& d : log.records()) EXPECT_DOUBLE_EQ(d.size, 2.0);
  DecisionLog log2;
  ctx = ctx_for(AttentionVariant::deformable_zero_offset());
  ctx.log = &log2;
  run(t, q, k, v, &wd, 1, 40, ctx);
  for (const auto& d : log2.records()) EXPECT_EQ(d.anchor, double(d.query));
}

TEST(MultiHead, SingleHeadIdentityOutput) {
  std::mt19937_64 rng(19);
  const Tensor x = random_matrix(7, 4, rng);
  AttentionParams p{1, 4, random_matrix(4, 4, rng), random_matrix(4, 4, rng), random_matrix(4, 4, rng),
                    Tensor::identity(4), {}, {}};
  Tape t;
  auto vars = bind(t, p, false);
  Var xv = t.leaf(x);
  const Tensor mh = multi_head(xv, vars, AttentionVariant::full(), 7).value();
  auto heads = project_qkv(xv, vars);
  const Tensor single = full_attention(heads[0].q, heads[0].k, heads[0].v, 7).value();
  EXPECT_LT(max_abs_diff(mh, single), 1e-12);
}

TEST(MultiHead, HeadPermutationInvariance) {
  std::mt19937_64 rng(20);
  const std::size_t heads = 3, dq = 2, d = 6;
  AttentionParams p{heads, dq, random_matrix(d, d, rng), random_matrix(d, d, rng), random_matrix(d, d, rng),
                    random_matrix(d, d, rng), random_matrix(d, 2, rng), {}};
  const std::vector<std::size_t> perm{2, 0, 1};
  AttentionParams pp = p;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t c = 0; c < dq; ++c) {
      const std::size_t to = h * dq + c, from = perm[h] * dq + c;
      for (std::size_t r = 0; r < d; ++r) {
        pp.w_q(r, to) = p.w_q(r, from);
        pp.w_k(r, to) = p.w_k(r, from);
        pp.w_v(r, to) = p.w_v(r, from);
        pp.w_o(to, r) = p.w_o(from, r);
      }
      pp.w_decision(to, 0) = p.w_decision(from, 0);
      pp.w_decision(to, 1) = p.w_decision(from, 1);
    }
  const Tensor x = random_matrix(9, d, rng);
  for (const AttentionVariant& var : {AttentionVariant::full(), AttentionVariant::deformable()}) {
    Tape t;
    const Tensor a = multi_head(t.leaf(x), bind(t, p, false), var, 8).value();
    const Tensor b = multi_head(t.leaf(x), bind(t, pp, false), var, 8).value();
    EXPECT_LT(max_abs_diff(a, b), 1e-12);
    EXPECT_EQ(a.cols(), d);
  }
}

TEST(Pat, Examples) {
  WindowDecision d;
  d.lo = 2;
  d.hi = 7;
  d.valid_length = 60;
  std::vector<WindowDecision> one{d};
  EXPECT_DOUBLE_EQ(pat(one), 10.0);
  EXPECT_THROW(pat(std::vector<WindowDecision>{}), ContractError);
  EXPECT_THROW(PatAccumulator().overall(), ContractError);
}

TEST(Pat, FullAndFixedWindow) {
  std::mt19937_64 rng(21);
  for (std::size_t L : {64u, 97u, 128u}) {
    const Tensor q = random_matrix(L, 4, rng);
    for (const AttentionVariant& var : {AttentionVariant::full(), AttentionVariant::fixed_window(0.1)}) {
      DecisionLog log;
      AttentionContext ctx = ctx_for(var);
      ctx.log = &log;
      Tape t;
      run(t, q, q, q, nullptr, 2, L, ctx);
      const double p = log.pat().overall();
      if (var.kind() == AttentionKind::Full)
        EXPECT_EQ(p, 100.0);
      else
        EXPECT_NEAR(p, 10.0, 1.0);
    }
  }
}

TEST(Variant, ParseAndValidate) {
  EXPECT_EQ(parse_variant("window"), AttentionVariant::fixed_window(0.1));
  EXPECT_EQ(parse_variant("deformable-fixed-size").pins().size_fraction, 0.05);
  EXPECT_THROW(parse_variant("sparse"), ConfigError);
  EXPECT_THROW(AttentionVariant::fixed_window(0.0), ConfigError);
  EXPECT_THROW(AttentionVariant::dcn_like(1.5), ConfigError);
}
