#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "mhssm/checks.hpp"
#include "mhssm/train.hpp"

using namespace mhssm;

namespace {

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
              const std::string& resume) {
  TrainConfig cfg = load_train_config(config);
  if (seed) cfg.seed = *seed;
  Trainer trainer(cfg, out);
  if (!resume.empty()) trainer.resume(resume);
  std::printf("training %s/%s on %s, %zu parameters, out=%s\n", to_string(cfg.encoder.frontend).c_str(),
              to_string(cfg.encoder.block_kind).c_str(), to_string(cfg.task.kind).c_str(),
              trainer.params().num_scalars(), out.c_str());
  const std::size_t every = std::max<std::size_t>(1, cfg.eval_every);
  TrainResult r = trainer.run([&](const StepMetrics& m) {
    if (m.step % every == 0) {
      std::printf("step %zu epoch %zu lr %.3g loss %.5f acc %.4f (%.1fs)\n", m.step, m.epoch, m.lr, m.loss,
                  m.acc, m.seconds);
      std::fflush(stdout);
    }
  });
  std::printf("done: %zu steps, eval accuracy %.4f%s\n", trainer.steps_done(), r.final_accuracy,
              r.reached_target ? " (target reached)" : "");
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& task_text, std::size_t batches) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  TrainConfig cfg = checkpoint_config(ckpt);
  TaskSpec task = task_text.empty() ? cfg.task : parse_task_overrides(task_text, cfg.task);
  Trainer trainer(cfg);
  trainer.resume(checkpoint);
  const Accuracy a = trainer.evaluate(task, batches ? batches : cfg.eval_batches);
  std::printf("task %s seq_len %zu vocab %zu\n", to_string(task.kind).c_str(), task.seq_len, task.vocab);
  std::printf("accuracy %.17g (%zu/%zu tokens)\n", a.value(), a.correct, a.total);
  return 0;
}

int cmd_params(const std::string& config) {
  TrainConfig cfg = load_train_config(config);
  EncoderConfig e = cfg.encoder;
  e.input_dim = cfg.task.input_dim();
  ParamReport r = param_count(e);
  const std::size_t head = linear_params(e.model_dim, e.subsampling() * cfg.task.vocab);
  for (const auto& [name, n] : r.rows) std::printf("%-12s %12zu\n", name.c_str(), n);
  std::printf("%-12s %12zu\n", "head", head);
  std::printf("%-12s %12zu\n", "total", r.total + head);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-head state space encoders: training, evaluation and self checks"};
  app.require_subcommand(1);

  std::string config, out = "run", resume, checkpoint, task;
  std::optional<std::uint64_t> seed;
  std::size_t batches = 0;

  auto* train = app.add_subcommand("train", "train a model on a synthetic task");
  train->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--out", out, "output directory for metrics and checkpoints");
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", task, "task overrides: JSON file, JSON object or key=value,...");
  eval->add_option("--batches", batches, "number of evaluation batches (default: config eval_batches)");

  auto* self = app.add_subcommand("selftest", "run the built-in invariant checks");
  auto* params = app.add_subcommand("params", "print the parameter count table");
  params->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config, seed, out, resume);
    if (*eval) return cmd_evaluate(checkpoint, task, batches);
    if (*params) return cmd_params(config);
    if (*self) {
      bool ok = true;
      for (const auto& r : run_checks(selftest_criteria(), std::cout)) ok = ok && r.passed;
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
