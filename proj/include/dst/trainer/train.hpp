#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dst/data/batch.hpp"
#include "dst/metrics/metrics.hpp"
#include "dst/model/model.hpp"
#include "dst/trainer/optimizer.hpp"
#include "dst/trainer/parallel.hpp"
#include "dst/trainer/schedule.hpp"

namespace dst::train {

using data::Sample;

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 0.05;
  SgdConfig sgd;
  std::size_t batch_size = 32;
  Schedule schedule;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  std::size_t patience = 0;  // 0 disables early stopping
  double clip_norm = 1.0;    // 0 disables clipping
  std::size_t threads = 0;   // 0: thread_count()
  // Samples per independent forward/backward unit. Results do not depend on
  // the thread count, only on this.
  std::size_t chunk_size = 8;

  void validate() const {
    std::string bad;
    if (epochs < 1) bad += " epochs must be >= 1;";
    if (!(lr > 0.0)) bad += " lr must be > 0;";
    if (!(sgd.decision_lr_factor > 0.0 && sgd.decision_lr_factor <= 1.0)) bad += " decision_lr_factor must lie in (0, 1];";
    if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) bad += " momentum must lie in [0, 1);";
    if (batch_size < 1) bad += " batch_size must be >= 1;";
    if (chunk_size < 1) bad += " chunk_size must be >= 1;";
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) bad += " validation_fraction must lie in [0, 1);";
    if (!(schedule.t0 > 0.0 && schedule.t_mult >= 1.0 && schedule.min_lr >= 0.0)) bad += " schedule needs t0 > 0, t_mult >= 1, min_lr >= 0;";
    if (!bad.empty()) {
      bad.pop_back();
      throw ConfigError("invalid train config:" + bad);
    }
  }
};

struct BatchGradients {
  std::vector<Tensor> grads;  // visit_params order
  double loss = 0.0;          // mean cross-entropy over the batch
};

/// Mean-loss gradients of one batch, computed chunk by chunk and summed in
/// chunk order. `dropout_seed` nullopt disables dropout.
inline BatchGradients batch_gradients(const DstModel& m, const std::vector<Sample>& samples,
                                      std::span<const std::size_t> indices, std::optional<std::uint64_t> dropout_seed,
                                      std::size_t chunk_size, std::size_t threads,
                                      const attn::FrozenDecisions* frozen = nullptr) {
  const std::size_t n = indices.size();
  const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
  std::vector<BatchGradients> parts(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const auto idx = indices.subspan(c * chunk_size, std::min(chunk_size, n - c * chunk_size));
    const data::PackedBatch pb = data::pack(samples, idx);
    num::Tape tape;
    const model::BoundModel bm = model::bind(tape, m, true);
    std::mt19937_64 rng(dropout_seed ? mix_seed(*dropout_seed, c) : 0);
    model::ForwardOptions o;
    o.train = dropout_seed.has_value();
    o.rng = &rng;
    o.frozen = frozen;
    o.sample_base = idx[0];
    const Var ce = num::cross_entropy(model::forward(bm, pb.features, pb.segments, o), pb.labels);
    const double share = static_cast<double>(idx.size()) / static_cast<double>(n);
    auto g = tape.backward(num::scale(ce, share));
    parts[c].loss = ce.value().item() * share;
    for (const Var& p : bm.params) parts[c].grads.push_back(g.take(p.id()));
  });
  BatchGradients out = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    out.loss += parts[c].loss;
    for (std::size_t i = 0; i < out.grads.size(); ++i)
      for (std::size_t k = 0; k < out.grads[i].size(); ++k) out.grads[i][k] += parts[c].grads[i][k];
  }
  return out;
}

struct Evaluation {
  std::vector<std::size_t> preds;
  std::vector<std::size_t> labels;
  std::vector<Tensor> logits;  // one [1 x C] row per sample
  attn::PatAccumulator pat;
  double loss = 0.0;
};

struct EvalOptions {
  std::size_t chunk_size = 8;
  std::size_t threads = 0;
};

/// Inference over `samples` in order. PAT sums are merged chunk by chunk so
/// the result does not depend on the thread count.
inline Evaluation evaluate(const DstModel& m, const std::vector<Sample>& samples, const EvalOptions& opts = {}) {
  const std::size_t n = samples.size();
  if (n == 0) throw ContractError("evaluate: no samples");
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk_size);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<Evaluation> parts(chunks);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  parallel_for(chunks, opts.threads, [&](std::size_t c) {
    const auto idx = std::span<const std::size_t>(order).subspan(c * chunk, std::min(chunk, n - c * chunk));
    const data::PackedBatch pb = data::pack(samples, idx);
    num::Tape tape;
    const model::BoundModel bm = model::bind(tape, m, false);
    attn::DecisionLog log(false, false);
    model::ForwardOptions o;
    o.log = &log;
    o.sample_base = idx[0];
    const Var logits = model::forward(bm, pb.features, pb.segments, o);
    Evaluation& e = parts[c];
    e.loss = num::cross_entropy(logits, pb.labels).value().item() * static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.value().row(r);
      e.preds.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      e.labels.push_back(pb.labels[r]);
      e.logits.emplace_back(num::Shape{std::size_t{1}, row.size()}, std::vector<double>(row.begin(), row.end()));
    }
    e.pat = log.pat();
  });
  Evaluation out;
  for (auto& p : parts) {
    out.preds.insert(out.preds.end(), p.preds.begin(), p.preds.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    for (auto& l : p.logits) out.logits.push_back(std::move(l));
    out.pat.merge(p.pat);
    out.loss += p.loss;
  }
  out.loss /= static_cast<double>(n);
  return out;
}

inline metrics::EvalReport report(const DstModel& m, const Evaluation& e) {
  return metrics::build_report(e.preds, e.labels, m.config.classes, m.config.variant, e.pat.empty() ? nullptr : &e.pat);
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> valid_loss, valid_wa, valid_ua, valid_wf1, valid_pat;
  bool best = false;
};

struct TrainResult {
  DstModel best;
  DstModel last;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  bool stopped_early = false;
};

/// SGD with momentum over shuffled batches; the learning rate follows the
/// warm-restart schedule per epoch. Keeps the model with the best validation
/// UA (the last one when there is no validation set).
inline TrainResult fit(DstModel m, const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  OptState opt = make_state(m);
  TrainResult result;
  result.best = m;
  double best_ua = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(static_cast<double>(epoch), cfg.schedule, cfg.lr);
    data::BatchIterator batches(train_set, cfg.batch_size, mix_seed(cfg.seed, 0x5348554646ULL, epoch));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.batch_count(); ++b) {
      const auto idx = batches.indices(b);
      const std::optional<std::uint64_t> drop =
          m.config.dropout > 0.0 ? std::optional(mix_seed(cfg.seed, epoch, b)) : std::nullopt;
      BatchGradients bg = batch_gradients(m, train_set, idx, drop, cfg.chunk_size, cfg.threads);
      clip_grad_norm(bg.grads, cfg.clip_norm);
      step(m, bg.grads, opt, cfg.sgd, lr);
      loss_sum += bg.loss * static_cast<double>(idx.size());
    }
    opt.epoch = epoch + 1;
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.lr = lr;
    entry.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (!valid_set.empty()) {
      const Evaluation ev = evaluate(m, valid_set, {cfg.chunk_size, cfg.threads});
      entry.valid_loss = ev.loss;
      entry.valid_wa = metrics::weighted_accuracy(ev.preds, ev.labels);
      entry.valid_ua = metrics::unweighted_accuracy(ev.preds, ev.labels);
      entry.valid_wf1 = metrics::weighted_f1(ev.preds, ev.labels);
      if (!ev.pat.empty()) entry.valid_pat = ev.pat.overall();
      else if (m.config.variant.kind() == attn::AttentionKind::Full) entry.valid_pat = 100.0;
      if (*entry.valid_ua > best_ua) {
        best_ua = *entry.valid_ua;
        entry.best = true;
        result.best = m;
        result.best_epoch = epoch + 1;
        since_best = 0;
      } else {
        ++since_best;
      }
    } else {
      entry.best = true;
      result.best = m;
      result.best_epoch = epoch + 1;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (cfg.patience > 0 && since_best >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.last = std::move(m);
  return result;
}

inline nlohmann::ordered_json to_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["train_loss"] = e.train_loss;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  j["valid_loss"] = opt(e.valid_loss);
  j["valid_wa"] = opt(e.valid_wa);
  j["valid_ua"] = opt(e.valid_ua);
  j["valid_wf1"] = opt(e.valid_wf1);
  j["valid_pat"] = opt(e.valid_pat);
  j["best"] = e.best;
  return j;
}

}  // namespace dst::train
