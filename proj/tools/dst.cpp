#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dst/cli/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string variant;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config");
  cmd->add_option("--set", c.sets, "Override a config key: dotted.key=value (repeatable)");
  cmd->add_option("--out", c.out, "Output directory (config key: out)");
  cmd->add_option("--seed", c.seed, "Run seed (config key: seed)");
  cmd->add_option("--variant", c.variant, "Attention variant (config key: model.variant)")
      ->check(CLI::IsMember({"full", "window", "dcn", "deformable", "deformable-fixed-size", "deformable-zero-offset"}));
}

dst::cli::RunConfig resolve(const Common& c) {
  std::vector<std::string> sets = c.sets;
  if (!c.variant.empty()) {
    sets.push_back("model.variant=\"" + c.variant + "\"");
    sets.push_back("model.fraction=null");
  }
  if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
  if (!c.out.empty()) sets.push_back("out=" + nlohmann::json(c.out).dump());
  std::optional<std::filesystem::path> file;
  if (!c.config.empty()) file = c.config;
  return dst::cli::from_json(dst::cli::resolve_json(file, sets));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable speech transformer: train, evaluate and inspect attention models"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, dump_opts, gen_opts, grad_opts;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoint, log and report");
  add_common(train, train_opts);

  auto* eval = app.add_subcommand("eval", "Print the evaluation report of a checkpoint");
  add_common(eval, eval_opts);
  std::string eval_ckpt, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "train, valid or test");

  auto* dump = app.add_subcommand("dump-attention", "Write per-query attention records for one sample");
  add_common(dump, dump_opts);
  std::string dump_ckpt, dump_sample = "0", dump_split = "test";
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint file")->required();
  dump->add_option("--sample", dump_sample, "Sample id, or index into --split");
  dump->add_option("--split", dump_split, "Split used for index lookup");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as a manifest with feature files");
  add_common(gen, gen_opts);

  auto* grad = app.add_subcommand("grad-check", "Compare tape gradients with finite differences");
  add_common(grad, grad_opts);
  std::string grad_ckpt;
  dst::cli::GradCheckArgs grad_args;
  grad->add_option("--checkpoint", grad_ckpt, "Checkpoint file (default: fresh model from the config)");
  grad->add_option("--samples", grad_args.samples, "Training samples in the checked batch");
  grad->add_option("--margin", grad_args.margin, "Kink margin for excluding window decisions");
  grad->add_option("--max-entries", grad_args.max_entries, "Entries checked per parameter (0: all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return dst::cli::cmd_train(resolve(train_opts), std::cerr);
    if (eval->parsed()) return dst::cli::cmd_eval(resolve(eval_opts), eval_ckpt, eval_split, std::cout);
    if (dump->parsed()) return dst::cli::cmd_dump_attention(resolve(dump_opts), dump_ckpt, dump_sample, dump_split, std::cerr);
    if (gen->parsed()) return dst::cli::cmd_gen_data(resolve(gen_opts), std::cerr);
    if (grad->parsed()) {
      if (!grad_ckpt.empty()) grad_args.checkpoint = grad_ckpt;
      return dst::cli::cmd_grad_check(resolve(grad_opts), grad_args, std::cout);
    }
  } catch (const dst::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dst::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
