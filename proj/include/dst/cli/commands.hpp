#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dst/cli/config.hpp"
#include "dst/data/batch.hpp"
#include "dst/data/manifest.hpp"
#include "dst/model/checkpoint.hpp"
#include "dst/trainer/grad_check.hpp"
#include "dst/trainer/train.hpp"

namespace dst::cli {

struct Splits {
  std::vector<data::Sample> train, valid, test;
};

inline void check_samples(const std::vector<data::Sample>& samples, const model::ModelConfig& m) {
  for (const auto& s : samples) {
    if (s.dim() != m.feature_dim) {
      throw DimensionError("sample '" + s.id + "' has feature dim " + std::to_string(s.dim()) +
                           " but the model expects " + std::to_string(m.feature_dim));
    }
    if (s.label >= m.classes) {
      throw ConfigError("sample '" + s.id + "' has label " + std::to_string(s.label) + " but the model has " +
                        std::to_string(m.classes) + " classes");
    }
  }
}

/// Train/validation/test sets for a run. Synthetic: the generated pool is
/// split for validation and a test set is drawn with a derived seed.
/// Manifest: "test"-tagged records and the optional test manifest form the
/// test set.
inline Splits load_splits(const DataSource& src, const model::ModelConfig& m, double validation_fraction,
                          std::uint64_t seed) {
  Splits out;
  std::vector<data::Sample> pool;
  if (src.synthetic) {
    pool = data::generate(*src.synthetic);
    data::SyntheticSpec t = *src.synthetic;
    t.seed = test_seed(t.seed);
    t.count = src.test_count;
    if (t.count > 0) out.test = data::generate(t);
  } else if (src.manifest) {
    const data::LoadOptions opts{m.max_length, std::nullopt};
    for (auto& s : data::load(*src.manifest, opts)) (s.split == "test" ? out.test : pool).push_back(std::move(s));
    if (src.test_manifest)
      for (auto& s : data::load(*src.test_manifest, opts)) out.test.push_back(std::move(s));
  } else {
    throw ConfigError("no data source configured");
  }
  std::tie(out.train, out.valid) = data::split_validation(std::move(pool), validation_fraction, seed);
  check_samples(out.train, m);
  check_samples(out.valid, m);
  check_samples(out.test, m);
  return out;
}

inline const std::vector<data::Sample>& pick_split(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "valid" || name == "validation") return s.valid;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw LoadError("cannot write " + path.string());
  f << text;
}

/// Trains, then writes config.json, train_log.jsonl, model.ckpt (best by
/// validation UA) and report.json under the output directory.
inline int cmd_train(const RunConfig& c, std::ostream& progress) {
  validate(c);
  fs::create_directories(c.out);
  write_text(c.out / "config.json", to_json(c).dump(2) + "\n");
  const Splits data = load_splits(c.data, c.model, c.train.validation_fraction, c.seed);
  if (data.train.empty()) throw ConfigError("training set is empty");
  progress << "train " << data.train.size() << " / valid " << data.valid.size() << " / test " << data.test.size()
           << " samples, variant " << c.model.variant.name() << "\n";

  std::ofstream log(c.out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw LoadError("cannot write " + (c.out / "train_log.jsonl").string());
  const auto result = train::fit(model::init(c.model, c.seed), data.train, data.valid, c.train, [&](const train::EpochLog& e) {
    log << train::to_json(e).dump() << '\n' << std::flush;
    progress << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.train_loss;
    if (e.valid_ua) progress << " valid UA " << *e.valid_ua;
    progress << (e.best ? " *" : "") << "\n";
  });
  model::save(c.out / "model.ckpt", result.best);

  const train::EvalOptions eo{c.train.chunk_size, c.train.threads};
  ordered_json report;
  report["variant"] = c.model.variant.name();
  report["seed"] = c.seed;
  report["best_epoch"] = result.best_epoch;
  report["epochs_run"] = result.log.size();
  report["stopped_early"] = result.stopped_early;
  report["final_train_loss"] = result.log.back().train_loss;
  report["parameters"] = model::parameter_count(result.best);
  report["validation"] = data.valid.empty() ? ordered_json(nullptr)
                                            : metrics::to_json(train::report(result.best, train::evaluate(result.best, data.valid, eo)));
  report["test"] = data.test.empty() ? ordered_json(nullptr)
                                     : metrics::to_json(train::report(result.best, train::evaluate(result.best, data.test, eo)));
  write_text(c.out / "report.json", report.dump(2) + "\n");
  progress << "wrote " << (c.out / "report.json").string() << "\n";
  return 0;
}

inline model::DstModel load_checkpoint_for(const fs::path& ckpt, const RunConfig& c) {
  model::DstModel m = model::load(ckpt);
  if (c.data.synthetic && c.data.synthetic->feature_dim != m.config.feature_dim) {
    throw DimensionError("checkpoint expects feature dim " + std::to_string(m.config.feature_dim) +
                         " but the data has " + std::to_string(c.data.synthetic->feature_dim));
  }
  return m;
}

/// Prints the EvalReport of a checkpoint on one split of the configured data.
inline int cmd_eval(const RunConfig& c, const fs::path& ckpt, const std::string& split, std::ostream& out) {
  const model::DstModel m = load_checkpoint_for(ckpt, c);
  const Splits data = load_splits(c.data, m.config, c.train.validation_fraction, c.seed);
  const auto& samples = pick_split(data, split);
  if (samples.empty()) throw ConfigError("split '" + split + "' is empty");
  const auto ev = train::evaluate(m, samples, {c.train.chunk_size, c.train.threads});
  out << metrics::to_json(train::report(m, ev)).dump(2) << "\n";
  return 0;
}

inline ordered_json trace_json(const attn::QueryTrace& t) {
  const auto& d = t.decision;
  ordered_json j;
  j["layer"] = d.layer;
  j["head"] = d.head;
  j["query"] = d.query;
  j["anchor"] = d.anchor;
  j["left"] = d.left;
  j["right"] = d.right;
  j["lo"] = d.lo;
  j["hi"] = d.hi;
  j["fallback"] = d.fallback;
  j["positions"] = t.positions;
  j["weights"] = t.weights;
  j["attention"] = t.attention;
  return j;
}

/// Writes attention.jsonl (one record per layer, head and query) and
/// sample.json for a single sample chosen by id or by index into `split`.
inline int cmd_dump_attention(const RunConfig& c, const fs::path& ckpt, const std::string& selector,
                              const std::string& split, std::ostream& progress) {
  const model::DstModel m = load_checkpoint_for(ckpt, c);
  const Splits data = load_splits(c.data, m.config, c.train.validation_fraction, c.seed);
  const data::Sample* chosen = nullptr;
  for (const auto* set : {&data.train, &data.valid, &data.test})
    for (const auto& s : *set)
      if (s.id == selector) chosen = &s;
  if (!chosen && !selector.empty() && selector.find_first_not_of("0123456789") == std::string::npos) {
    const auto& samples = pick_split(data, split);
    const std::size_t i = std::stoul(selector);
    if (i < samples.size()) chosen = &samples[i];
  }
  if (!chosen) throw IndexError("no sample '" + selector + "' (by id, or by index into the " + split + " split)");

  num::Tape tape;
  attn::DecisionLog log(true, true);
  model::ForwardOptions o;
  o.log = &log;
  const auto logits = model::forward(model::bind(tape, m, false), chosen->features, chosen->valid, o).value();

  fs::create_directories(c.out);
  std::ofstream f(c.out / "attention.jsonl", std::ios::trunc);
  if (!f) throw LoadError("cannot write " + (c.out / "attention.jsonl").string());
  for (const auto& t : log.traces()) f << trace_json(t).dump() << '\n';

  ordered_json s;
  s["id"] = chosen->id;
  s["label"] = chosen->label;
  s["valid_length"] = chosen->valid;
  s["variant"] = m.config.variant.name();
  s["logits"] = std::vector<double>(logits.values().begin(), logits.values().end());
  s["cue_mask"] = chosen->cue_mask.empty() ? ordered_json(nullptr) : ordered_json(chosen->cue_mask);
  write_text(c.out / "sample.json", s.dump(2) + "\n");
  progress << "wrote " << log.traces().size() << " records to " << (c.out / "attention.jsonl").string() << "\n";
  return 0;
}

/// Materializes the synthetic train and test sets as one split-tagged
/// manifest with feature files and cue masks.
inline int cmd_gen_data(const RunConfig& c, std::ostream& progress) {
  if (!c.data.synthetic) throw ConfigError("gen-data needs data.synthetic");
  c.data.synthetic->validate();
  auto train_set = data::generate(*c.data.synthetic);
  for (auto& s : train_set) s.split = "train";
  data::SyntheticSpec t = *c.data.synthetic;
  t.seed = test_seed(t.seed);
  t.count = c.data.test_count;
  if (t.count > 0) {
    auto test_set = data::generate(t);
    for (auto& s : test_set) s.split = "test";
    train_set.insert(train_set.end(), std::make_move_iterator(test_set.begin()), std::make_move_iterator(test_set.end()));
  }
  fs::create_directories(c.out);
  const auto manifest = data::write_dataset(c.out, train_set);
  write_text(c.out / "config.json", to_json(c).dump(2) + "\n");
  progress << "wrote " << train_set.size() << " samples to " << manifest.string() << "\n";
  return 0;
}

struct GradCheckArgs {
  std::optional<fs::path> checkpoint;
  std::size_t samples = 2;
  double margin = 0.2;
  std::size_t max_entries = 16;
};

/// Prints a per-group comparison of tape and finite-difference gradients;
/// exit 1 when any group exceeds its tolerance.
inline int cmd_grad_check(const RunConfig& c, const GradCheckArgs& a, std::ostream& out) {
  if (!(a.margin > 0.0 && a.margin < 0.5)) throw ConfigError("kink margin must lie in (0, 0.5)");
  model::DstModel m = a.checkpoint ? load_checkpoint_for(*a.checkpoint, c) : model::init(c.model, c.seed);
  m.config.dropout = 0.0;
  const Splits data = load_splits(c.data, m.config, c.train.validation_fraction, c.seed);
  std::vector<data::Sample> picked(data.train.begin(), data.train.begin() + static_cast<std::ptrdiff_t>(std::min(a.samples, data.train.size())));
  if (picked.empty()) throw ConfigError("no training samples for the gradient check");
  train::GradCheckOptions o;
  o.kink_margin = a.margin;
  o.max_entries = a.max_entries;
  o.seed = c.seed;
  const auto r = train::grad_check(m, picked, o);
  ordered_json j;
  j["queries"] = r.queries;
  j["excluded_queries"] = r.excluded_queries;
  j["passed"] = r.passed();
  j["groups"] = ordered_json::array();
  for (const auto& g : r.groups) {
    j["groups"].push_back({{"name", g.name},
                           {"decision", g.kind == model::ParamKind::Decision},
                           {"checked", g.checked},
                           {"rel_error", g.rel_error},
                           {"tolerance", g.tolerance},
                           {"passed", g.passed()}});
  }
  out << j.dump(2) << "\n";
  return r.passed() ? 0 : 1;
}

}  // namespace dst::cli
