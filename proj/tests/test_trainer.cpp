#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numbers>

#include "dst/data/synthetic.hpp"
#include "dst/trainer/grad_check.hpp"
#include "dst/trainer/train.hpp"

using namespace dst;
using namespace dst::train;
using model::DstModel;
using model::ModelConfig;

namespace {

ModelConfig tiny(attn::AttentionVariant v = attn::AttentionVariant::deformable()) {
  ModelConfig c;
  c.feature_dim = 6;
  c.d_model = 8;
  c.heads = 2;
  c.blocks = 2;
  c.classes = 3;
  c.dropout = 0.0;
  c.max_length = 24;
  c.variant = v;
  return c;
}

std::vector<data::Sample> tiny_data(std::size_t count, std::uint64_t seed) {
  data::SyntheticSpec s;
  s.classes = 3;
  s.feature_dim = 6;
  s.min_length = 10;
  s.max_length = 20;
  s.count = count;
  s.seed = seed;
  return data::generate(s);
}

std::vector<double> flat(const DstModel& m) {
  std::vector<double> v;
  model::visit_params(m, [&](const std::string&, const Tensor& t, model::ParamKind) {
    v.insert(v.end(), t.values().begin(), t.values().end());
  });
  return v;
}

}  // namespace

TEST(Schedule, Examples) {
  const Schedule s{10, 2, 0};
  EXPECT_DOUBLE_EQ(lr_at(0, s, 1e-3), 1e-3);
  EXPECT_NEAR(lr_at(5, s, 1e-3), 5e-4, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(10, s, 1e-3), 1e-3);
  EXPECT_NEAR(lr_at(20, s, 1e-3), 5e-4, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(30, s, 1e-3), 1e-3);
  const Schedule floor{10, 2, 1e-4};
  EXPECT_NEAR(lr_at(5, floor, 1e-3), 5.5e-4, 1e-15);
}

TEST(Schedule, PeriodicWithUnitMultiplier) {
  const Schedule s{7, 1, 0};
  for (double t : {0.0, 1.5, 3.0, 6.9}) {
    EXPECT_NEAR(lr_at(t, s, 0.1), lr_at(t + 7, s, 0.1), 1e-15);
    EXPECT_NEAR(lr_at(t, s, 0.1), lr_at(t + 21, s, 0.1), 1e-15);
  }
}

TEST(Schedule, BoundedAndMonotoneWithinCycle) {
  const Schedule s{10, 2, 1e-5};
  double prev = 1.0;
  for (double t = 0; t < 10; t += 0.25) {
    const double lr = lr_at(t, s, 1e-3);
    EXPECT_GE(lr, 1e-5);
    EXPECT_LE(lr, 1e-3);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(lr_at(-1, s, 1e-3), ContractError);
  EXPECT_THROW(lr_at(1, Schedule{0, 2, 0}, 1e-3), ConfigError);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  DstModel m = model::init(tiny(), 1);
  const auto before = flat(m);
  OptState st = make_state(m);
  std::vector<Tensor> g;
  for (const auto& v : st.velocity) g.push_back(num::zeros_like(v));
  step(m, g, st, {}, 0.1);
  EXPECT_EQ(flat(m), before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Optimizer, MomentumScalarSequence) {
  DstModel m = model::init(tiny(), 1);
  OptState st = make_state(m);
  std::vector<Tensor> g;
  for (const auto& v : st.velocity) g.push_back(num::zeros_like(v));
  // classifier.bias is the last parameter group.
  g.back()[0] = 1.0;
  const double b0 = m.b_cls[0];
  step(m, g, st, {0.9, 0.1}, 0.1);
  EXPECT_NEAR(m.b_cls[0], b0 - 0.1, 1e-15);
  step(m, g, st, {0.9, 0.1}, 0.1);
  EXPECT_NEAR(m.b_cls[0], b0 - 0.1 - 0.19, 1e-15);
}

TEST(Optimizer, DecisionParametersUseScaledRate) {
  DstModel m = model::init(tiny(), 2);
  OptState st = make_state(m);
  std::vector<Tensor> g;
  for (const auto& v : st.velocity) g.push_back(Tensor(v.shape(), 1.0));
  const DstModel before = m;
  step(m, g, st, {0.0, 0.1}, 0.5);
  std::vector<double> deltas_regular, deltas_decision;
  std::size_t i = 0;
  std::vector<Tensor> after;
  model::visit_params(m, [&](const std::string&, const Tensor& t, model::ParamKind) { after.push_back(t); });
  model::visit_params(before, [&](const std::string&, const Tensor& t, model::ParamKind kind) {
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double d = t[k] - after[i][k];
      EXPECT_NEAR(d, kind == model::ParamKind::Decision ? 0.05 : 0.5, 1e-12);
    }
    ++i;
  });
}

TEST(Optimizer, RejectsMismatchedGradients) {
  DstModel m = model::init(tiny(), 1);
  OptState st = make_state(m);
  std::vector<Tensor> g(st.velocity.size() - 1);
  EXPECT_THROW(step(m, g, st, {}, 0.1), ContractError);
  std::vector<Tensor> wrong;
  for (const auto& v : st.velocity) wrong.push_back(num::zeros_like(v));
  wrong[0] = Tensor::matrix(1, 1);
  EXPECT_THROW(step(m, wrong, st, {}, 0.1), ContractError);
}

TEST(Optimizer, ClipGradNorm) {
  std::vector<Tensor> g{Tensor::vector({3.0, 0.0}), Tensor::vector({4.0})};
  EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
  clip_grad_norm(g, 1.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  clip_grad_norm(g, 0.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
}

TEST(Parallel, ThreadCountFromEnvironment) {
  ::setenv("DST_THREADS", "3", 1);
  EXPECT_EQ(thread_count(), 3u);
  ::setenv("DST_THREADS", "zero", 1);
  EXPECT_GE(thread_count(), 1u);
  ::unsetenv("DST_THREADS");
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw ContractError("x"); }), ContractError);
}

TEST(Training, BatchGradientsIndependentOfThreads) {
  const DstModel m = model::init(tiny(), 3);
  const auto data = tiny_data(20, 3);
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  const auto a = batch_gradients(m, data, idx, 99, 4, 1);
  const auto b = batch_gradients(m, data, idx, 99, 4, 4);
  EXPECT_EQ(a.loss, b.loss);
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_TRUE(std::ranges::equal(a.grads[i].values(), b.grads[i].values()));
}

TEST(Training, ChunkedGradientMatchesWholeBatch) {
  const DstModel m = model::init(tiny(), 4);
  const auto data = tiny_data(10, 4);
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  const auto whole = batch_gradients(m, data, idx, std::nullopt, 10, 1);
  const auto parts = batch_gradients(m, data, idx, std::nullopt, 3, 1);
  EXPECT_NEAR(whole.loss, parts.loss, 1e-12);
  for (std::size_t i = 0; i < whole.grads.size(); ++i)
    for (std::size_t k = 0; k < whole.grads[i].size(); ++k)
      EXPECT_NEAR(whole.grads[i][k], parts.grads[i][k], 1e-12);
}

TEST(Training, LossDecreasesOnRepeatedBatch) {
  DstModel m = model::init(tiny(), 5);
  const auto data = tiny_data(12, 5);
  std::vector<std::size_t> idx(12);
  std::iota(idx.begin(), idx.end(), 0);
  OptState st = make_state(m);
  double prev = batch_gradients(m, data, idx, std::nullopt, 8, 1).loss;
  const double first = prev;
  for (int it = 0; it < 20; ++it) {
    auto bg = batch_gradients(m, data, idx, std::nullopt, 8, 1);
    step(m, bg.grads, st, {0.0, 1.0}, 0.05);
    const double now = batch_gradients(m, data, idx, std::nullopt, 8, 1).loss;
    EXPECT_LE(now, prev + 1e-9) << "iteration " << it;
    prev = now;
  }
  EXPECT_LT(prev, first);
}

TEST(Training, DefaultTaskDescendsOnRepeatedBatch) {
  data::SyntheticSpec spec;
  spec.count = 4;
  const auto data = data::generate(spec);
  DstModel m = model::init(ModelConfig{}, 3);
  auto st = make_state(m);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  double prev = batch_gradients(m, data, idx, std::nullopt, 8, 1).loss;
  const double first = prev;
  for (int it = 0; it < 50; ++it) {
    auto bg = batch_gradients(m, data, idx, std::nullopt, 8, 1);
    step(m, bg.grads, st, SgdConfig{}, 1e-3);
    const double now = batch_gradients(m, data, idx, std::nullopt, 8, 1).loss;
    EXPECT_LE(now, prev) << "step " << it;
    prev = now;
  }
  EXPECT_LT(prev, first);
}

TEST(Training, DeterministicAcrossRunsAndThreads) {
  auto cfg = tiny();
  cfg.dropout = 0.1;
  const auto train_set = tiny_data(24, 6), valid_set = tiny_data(9, 7);
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = 0.05;
  tc.batch_size = 8;
  tc.chunk_size = 4;
  tc.threads = 1;
  const auto a = fit(model::init(cfg, 6), train_set, valid_set, tc);
  tc.threads = 3;
  const auto b = fit(model::init(cfg, 6), train_set, valid_set, tc);
  EXPECT_EQ(flat(a.last), flat(b.last));
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(to_json(a.log[i]).dump(), to_json(b.log[i]).dump());
}

TEST(Training, EarlyStoppingAndBestModel) {
  const auto train_set = tiny_data(12, 8), valid_set = tiny_data(6, 9);
  TrainConfig tc;
  tc.epochs = 50;
  tc.lr = 1e-9;
  tc.batch_size = 6;
  tc.patience = 2;
  const auto r = fit(model::init(tiny(), 8), train_set, valid_set, tc);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_TRUE(r.log[0].best);
  const Evaluation e = evaluate(r.best, valid_set);
  EXPECT_DOUBLE_EQ(metrics::unweighted_accuracy(e.preds, e.labels), *r.log[0].valid_ua);
}

TEST(Training, LogRecordsScheduleAndMetrics) {
  const auto train_set = tiny_data(12, 10), valid_set = tiny_data(6, 11);
  TrainConfig tc;
  tc.epochs = 4;
  tc.lr = 0.01;
  tc.batch_size = 4;
  tc.schedule = {2, 1, 0};
  std::size_t calls = 0;
  const auto r = fit(model::init(tiny(), 10), train_set, valid_set, tc, [&](const EpochLog&) { ++calls; });
  EXPECT_EQ(calls, 4u);
  EXPECT_DOUBLE_EQ(r.log[0].lr, 0.01);
  EXPECT_NEAR(r.log[1].lr, 0.005, 1e-15);
  EXPECT_DOUBLE_EQ(r.log[2].lr, 0.01);
  for (const auto& e : r.log) {
    ASSERT_TRUE(e.valid_pat.has_value());
    EXPECT_GT(*e.valid_pat, 0.0);
    EXPECT_LE(*e.valid_pat, 100.0);
    EXPECT_TRUE(std::isfinite(e.train_loss));
  }
  const auto j = to_json(r.log[0]);
  EXPECT_TRUE(j.contains("valid_ua"));
  EXPECT_FALSE(j.contains("seconds"));
}

TEST(Training, RejectsBadConfig) {
  TrainConfig tc;
  tc.lr = 0;
  tc.batch_size = 0;
  try {
    tc.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
  }
  tc = {};
  EXPECT_THROW(fit(model::init(tiny(), 1), {}, {}, tc), ContractError);
}

TEST(Evaluate, PatForFixedWindowAndFull) {
  const auto data = tiny_data(10, 12);
  const auto w = evaluate(model::init(tiny(attn::AttentionVariant::fixed_window(0.1)), 1), data);
  const auto rw = report(model::init(tiny(attn::AttentionVariant::fixed_window(0.1)), 1), w);
  ASSERT_TRUE(rw.pat);
  const auto full_model = model::init(tiny(attn::AttentionVariant::full()), 1);
  const auto rf = report(full_model, evaluate(full_model, data));
  EXPECT_DOUBLE_EQ(rf.pat->overall, 100.0);
}

TEST(GradCheck, TinyModelPasses) {
  const auto data = tiny_data(3, 13);
  auto cfg = tiny();
  cfg.decision_init_scale = 1.0;
  const GradCheckReport r = grad_check(model::init(cfg, 13), data);
  EXPECT_GT(r.queries, 0u);
  EXPECT_LT(r.excluded_queries, r.queries);
  for (const auto& g : r.groups) EXPECT_TRUE(g.passed()) << g.name << " " << g.rel_error;
  EXPECT_LT(r.worst(model::ParamKind::Regular), 1e-5);
  EXPECT_LT(r.worst(model::ParamKind::Decision), 1e-4);
}

TEST(GradCheck, FreshInitSitsOnAnchorKinks) {
  const auto data = tiny_data(2, 16);
  const GradCheckReport r = grad_check(model::init(tiny(), 16), data);
  EXPECT_EQ(r.excluded_queries, r.queries);
}

TEST(GradCheck, ZeroMarginKeepsEveryQuery) {
  const auto data = tiny_data(2, 14);
  GradCheckOptions o;
  o.kink_margin = 0.0;
  o.max_entries = 3;
  const GradCheckReport r = grad_check(model::init(tiny(), 14), data, o);
  EXPECT_EQ(r.excluded_queries, 0u);
  for (const auto& g : r.groups) EXPECT_LE(g.checked, 3u);
}

TEST(GradCheck, FullVariantHasNoDecisionGroups) {
  const auto data = tiny_data(2, 15);
  const GradCheckReport r = grad_check(model::init(tiny(attn::AttentionVariant::full()), 15), data);
  EXPECT_EQ(r.excluded_queries, 0u);
  for (const auto& g : r.groups) EXPECT_EQ(g.kind, model::ParamKind::Regular);
  EXPECT_TRUE(r.passed());
}
