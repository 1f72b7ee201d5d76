#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mhssm/train.hpp"

using namespace mhssm;

namespace {

std::vector<int> decode(const Tensor& x, std::size_t b) {
  const std::size_t len = x.dim(1), dim = x.dim(2);
  std::vector<int> out(len, -1);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < dim; ++c)
      if (x[(b * len + t) * dim + c] == 1.0) {
        EXPECT_EQ(out[t], -1) << "two hot entries at t=" << t;
        out[t] = static_cast<int>(c);
      }
  return out;
}

TrainConfig small(BlockKind kind) {
  TrainConfig c;
  c.task.seq_len = 16;
  c.task.lag = 2;
  c.task.vocab = 4;
  c.encoder.frontend = Frontend::linear;
  c.encoder.block_kind = kind;
  c.encoder.model_dim = 16;
  c.encoder.num_layers = 1;
  c.encoder.attn_heads = 2;
  c.encoder.ffn_dim = 32;
  c.encoder.dropout = 0.0;
  c.encoder.mh_ssm.heads = 2;
  c.encoder.mh_ssm.state_dim = 8;
  c.batch_size = 4;
  c.max_steps = 10;
  c.steps_per_epoch = 5;
  c.eval_every = 5;
  c.eval_batches = 2;
  c.checkpoint_every = 2;
  c.schedule.peak_lr = 3e-3;
  c.schedule.warmup_steps = 10;
  c.seed = 3;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mhssm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(Schedule, WarmupHoldDecay) {
  Schedule s;
  s.peak_lr = 2e-3;
  EXPECT_EQ(s.warmup_steps, 500u);
  EXPECT_EQ(s.hold_epochs, 10u);
  EXPECT_EQ(s.decay, 0.96);
  EXPECT_DOUBLE_EQ(lr_at(s, 500, 0), 2e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 250, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 5000, 10), 2e-3);
  EXPECT_NEAR(lr_at(s, 5000, 13), 2e-3 * 0.96 * 0.96 * 0.96, 1e-18);
}

TEST(Schedule, ContinuousAtWarmupAndMonotoneAfterHold) {
  Schedule s;
  EXPECT_NEAR(lr_at(s, s.warmup_steps - 1, 0), lr_at(s, s.warmup_steps, 0), s.peak_lr / s.warmup_steps + 1e-18);
  EXPECT_EQ(lr_at(s, s.warmup_steps, 0), lr_at(s, s.warmup_steps + 1, 0));
  double prev = lr_at(s, 100000, s.hold_epochs);
  for (std::size_t e = s.hold_epochs + 1; e < 200; ++e) {
    const double lr = lr_at(s, 100000, e);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Tasks, DelayedEchoTargets) {
  const std::vector<int> in{3, 1, 4, 1};
  EXPECT_EQ(delayed_echo_targets(in, 2), (std::vector<int>{kIgnoreIndex, kIgnoreIndex, 3, 1}));
  EXPECT_EQ(delayed_echo_targets(in, 0), in);
}

TEST(Tasks, DelayedEchoBatchIsOneHotAndShifted) {
  TaskSpec spec;
  spec.seq_len = 40;
  spec.lag = 7;
  spec.vocab = 5;
  TaskBatch b = generate_task(spec, 3, 11);
  ASSERT_EQ(b.inputs.data.shape(), (Shape{3, 40, 5}));
  EXPECT_EQ(b.inputs.lengths, (Lengths{40, 40, 40}));
  for (std::size_t r = 0; r < 3; ++r) {
    auto sym = decode(b.inputs.data, r);
    for (std::size_t t = 0; t < 40; ++t) {
      ASSERT_GE(sym[t], 0);
      EXPECT_EQ(b.targets[r * 40 + t], t < 7 ? kIgnoreIndex : sym[t - 7]);
    }
  }
}

TEST(Tasks, SelectiveCopyMatchesLoopOracle) {
  TaskSpec spec;
  spec.kind = TaskKind::selective_copy;
  spec.seq_len = 50;
  spec.vocab = 6;
  spec.num_markers = 5;
  TaskBatch b = generate_task(spec, 4, 2);
  ASSERT_EQ(b.inputs.data.shape(), (Shape{4, 50, 8}));
  for (std::size_t r = 0; r < 4; ++r) {
    auto sym = decode(b.inputs.data, r);
    std::vector<int> marked;
    std::size_t recall = 0;
    for (std::size_t t = 0; t < 50; ++t) {
      if (sym[t] < 6) {
        EXPECT_LT(t, 45u);
        marked.push_back(sym[t]);
      } else if (sym[t] == 7) {
        EXPECT_GE(t, 45u);
        ++recall;
      }
    }
    ASSERT_EQ(marked.size(), 5u);
    EXPECT_EQ(recall, 5u);
    for (std::size_t t = 0; t < 50; ++t) {
      const int want = t >= 45 ? marked[t - 45] : kIgnoreIndex;
      EXPECT_EQ(b.targets[r * 50 + t], want);
    }
  }
}

TEST(Tasks, DeterministicPerSeedAndIndex) {
  TaskSpec spec;
  spec.seq_len = 20;
  spec.lag = 3;
  auto a = generate_task(spec, 2, 5), b = generate_task(spec, 2, 5), c = generate_task(spec, 2, 6);
  EXPECT_TRUE(identical(a.inputs.data, b.inputs.data));
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_FALSE(identical(a.inputs.data, c.inputs.data));
  spec.seed += 1;
  EXPECT_FALSE(identical(a.inputs.data, generate_task(spec, 2, 5).inputs.data));
}

TEST(Tasks, InvalidSpecsAreConfigErrors) {
  TaskSpec spec;
  spec.seq_len = 8;
  spec.lag = 8;
  EXPECT_THROW(generate_task(spec, 1, 0), ConfigError);
  spec.lag = 1;
  spec.vocab = 1;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec.vocab = 4;
  spec.kind = TaskKind::selective_copy;
  spec.num_markers = 5;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterSet p;
  Rng rng(1);
  p.declare("w", {3, 4}, [&] { return uniform_tensor({3, 4}, -1, 1, rng); });
  const Tensor before = p.get("w");
  Adam adam;
  for (int i = 0; i < 5; ++i) adam.step(p, {{"w", Tensor::zeros({3, 4})}}, 0.1);
  EXPECT_TRUE(identical(p.get("w"), before));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {1e-3, 0.5, -7.0}) {
    ParameterSet p;
    p.declare("x", {}, [] { return Tensor::scalar(2.0); });
    Adam adam;
    adam.step(p, {{"x", Tensor::scalar(g)}}, 0.01);
    EXPECT_NEAR(p.get("x").item(), 2.0 - 0.01 * (g > 0 ? 1 : -1), 1e-7) << g;
  }
}

TEST(Adam, MatchesScalarReferenceOnQuadratic) {
  // f(x) = 0.5 * a * (x - c)^2 per coordinate.
  const std::vector<double> a{0.5, 3.0, 10.0}, c{1.0, -2.0, 0.25};
  ParameterSet p;
  p.declare("x", {3}, [] { return Tensor({3}, {0.0, 0.0, 0.0}); });
  Adam adam;
  std::vector<double> x(3, 0.0), m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 100; ++t) {
    const double lr = 0.05;
    Tensor g({3});
    for (int i = 0; i < 3; ++i) g.mutable_data()[i] = a[i] * (p.get("x")[i] - c[i]);
    adam.step(p, {{"x", g}}, lr);
    for (int i = 0; i < 3; ++i) {
      const double gi = a[i] * (x[i] - c[i]);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.get("x")[i], x[i], 1e-10);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterSet p;
  p.declare("good", {2}, [] { return Tensor({2}, {1, 2}); });
  p.declare("bad", {2}, [] { return Tensor({2}, {1, 2}); });
  Adam adam;
  try {
    adam.step(p, {{"good", Tensor({2}, {1, 1})}, {"bad", Tensor({2}, {1, std::nan("")})}}, 0.1);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(identical(p.get("good"), Tensor({2}, {1, 2})));
  EXPECT_EQ(adam.steps(), 0u);
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  NamedTensors g{{"a", Tensor({2}, {3, 0})}, {"b", Tensor({1}, {4})}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(g.at("a")[0], 0.6);
  EXPECT_DOUBLE_EQ(g.at("b")[0], 0.8);
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 10.0), 1.0);
  EXPECT_DOUBLE_EQ(g.at("b")[0], 0.8);
}

TEST(Config, DefaultsRoundTripAndErrors) {
  TrainConfig d = parse_train_config("{}");
  EXPECT_EQ(d.batch_size, 32u);
  EXPECT_EQ(d.encoder.mh_ssm.state_dim, 64u);
  EXPECT_EQ(d.schedule.warmup_steps, 500u);
  TrainConfig c = small(BlockKind::stateformer);
  c.encoder.mh_ssm.gating = Gating::glu;
  c.fixed_batch = true;
  TrainConfig back = parse_train_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(parse_train_config("{\"modle_dim\": 4}"), ConfigError);
  EXPECT_THROW(parse_train_config("{\"model_dim\": \"big\"}"), ConfigError);
  EXPECT_THROW(parse_train_config("{\"model_dim\": -4}"), ConfigError);
  EXPECT_THROW(parse_train_config("{\"heads\": 3}"), ConfigError);
  EXPECT_THROW(parse_train_config("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_train_config("{"), ConfigError);
}

TEST(Config, TaskOverrides) {
  TaskSpec base;
  TaskSpec t = parse_task_overrides("lag=5,seq_len=64", base);
  EXPECT_EQ(t.lag, 5u);
  EXPECT_EQ(t.seq_len, 64u);
  EXPECT_EQ(t.vocab, base.vocab);
  t = parse_task_overrides("{\"task\": \"selective_copy\", \"num_markers\": 3}", base);
  EXPECT_EQ(t.kind, TaskKind::selective_copy);
  EXPECT_EQ(t.num_markers, 3u);
  t = parse_task_overrides("task=selective_copy", base);
  EXPECT_EQ(t.kind, TaskKind::selective_copy);
  EXPECT_THROW(parse_task_overrides("model_dim=3", base), ConfigError);
  EXPECT_THROW(parse_task_overrides("lag", base), ConfigError);
}

TEST(Model, SubsamplingFrontendPredictsFourTokensPerFrame) {
  TrainConfig c = small(BlockKind::mh_ssm);
  c.encoder.frontend = Frontend::tr;
  c.task.seq_len = 18;
  ParameterSet p;
  TokenModel m(c, p);
  TaskBatch b = generate_task(c.task, 2, 0);
  Context ctx(p);
  Var logits = m.logits(ctx, b.inputs);
  EXPECT_EQ(logits.shape(), (Shape{2, 20, 4}));
  const auto t = pad_targets(b.targets, 18, 20);
  EXPECT_EQ(t[18], kIgnoreIndex);
  EXPECT_EQ(t[20 + 17], b.targets[18 + 17]);
  EXPECT_TRUE(std::isfinite(cross_entropy(logits, t, kIgnoreIndex).value().item()));
}

TEST(Training, UntrainedModelIsAtChance) {
  TrainConfig c = small(BlockKind::mh_ssm);
  c.task.vocab = 8;
  c.task.seq_len = 64;
  c.batch_size = 16;
  c.eval_batches = 8;
  Trainer t(c);
  const Accuracy a = t.evaluate();
  EXPECT_GT(a.total, 7000u);
  EXPECT_NEAR(a.value(), 1.0 / 8.0, 0.05);
}

TEST(Training, OverfitsSingleBatch) {
  for (BlockKind k : {BlockKind::mh_ssm, BlockKind::stateformer, BlockKind::transformer}) {
    TrainConfig c = small(k);
    c.fixed_batch = true;
    c.max_steps = 2000;
    c.schedule.warmup_steps = 20;
    Trainer t(c);
    double loss = 1e9;
    while (t.steps_done() < c.max_steps && loss >= 0.01) loss = t.step().loss;
    EXPECT_LT(loss, 0.01) << to_string(k) << " after " << t.steps_done() << " steps";
  }
}

TEST(Training, LossMovingAverageDoesNotIncrease) {
  TrainConfig c = small(BlockKind::mh_ssm);
  c.task.seq_len = 64;
  c.task.lag = 8;
  c.task.vocab = 8;
  c.encoder.model_dim = 32;
  c.encoder.num_layers = 2;
  c.encoder.ffn_dim = 64;
  c.encoder.mh_ssm.heads = 4;
  c.encoder.dropout = 0.1;
  c.batch_size = 4;
  c.max_steps = 800;
  c.steps_per_epoch = 100;
  c.schedule.warmup_steps = 100;
  c.eval_every = 1000;
  Trainer t(c);
  std::vector<double> window_means;
  double acc = 0;
  for (std::size_t s = 1; s <= c.max_steps; ++s) {
    acc += t.step().loss;
    if (s % 200 == 0) {
      window_means.push_back(acc / 200);
      acc = 0;
    }
  }
  for (std::size_t i = 1; i < window_means.size(); ++i)
    EXPECT_LE(window_means[i], window_means[i - 1]) << "window " << i;
}

TEST(Training, RunWritesCsvAndIsDeterministic) {
  const auto d1 = scratch("run1"), d2 = scratch("run2");
  TrainConfig c = small(BlockKind::stateformer);
  c.encoder.dropout = 0.1;
  TrainResult a = Trainer(c, d1.string()).run();
  TrainResult b = Trainer(c, d2.string()).run();
  ASSERT_EQ(a.log.size(), 10u);
  for (std::size_t i = 0; i < a.log.size(); ++i)
    EXPECT_EQ(metrics_csv_row(a.log[i], false), metrics_csv_row(b.log[i], false));
  const std::string csv = slurp(d1 / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
  EXPECT_TRUE(std::filesystem::exists(d1 / "checkpoint.bin"));
  EXPECT_EQ(slurp(d1 / "eval.csv"), slurp(d2 / "eval.csv"));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(Training, ResumeReproducesNextStepBitwise) {
  const auto dir = scratch("resume");
  const std::string path = (dir / "ck.bin").string();
  TrainConfig c = small(BlockKind::stateformer);
  c.encoder.dropout = 0.1;
  Trainer a(c);
  for (int i = 0; i < 6; ++i) a.step();
  a.save(path);
  const StepMetrics next = a.step();

  Trainer b(c);
  b.resume(path);
  EXPECT_EQ(b.steps_done(), 6u);
  const StepMetrics again = b.step();
  EXPECT_EQ(metrics_csv_row(next, false), metrics_csv_row(again, false));
  for (const auto& n : a.params().names()) EXPECT_TRUE(identical(a.params().get(n), b.params().get(n))) << n;

  // Round trip keeps evaluation bitwise.
  Trainer e(checkpoint_config(load_checkpoint(path)));
  e.resume(path);
  Trainer f(c);
  f.resume(path);
  EXPECT_EQ(e.evaluate().correct, f.evaluate().correct);

  TrainConfig other = c;
  other.encoder.model_dim = 32;
  Trainer wrong(other);
  EXPECT_THROW(wrong.resume(path), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Training, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  const auto dir = scratch("nan");
  TrainConfig c = small(BlockKind::mh_ssm);
  Trainer good(c, dir.string());
  good.run();
  const std::string ckpt = (dir / "checkpoint.bin").string();
  const std::string saved = slurp(ckpt);

  // Poison one parameter and continue training into the same directory.
  Checkpoint poisoned = load_checkpoint(ckpt);
  for (auto& [name, t] : poisoned.tensors) {
    if (name == "param/head.bias") t.mutable_data()[0] = std::nan("");
  }
  const std::string bad = (dir / "poisoned.bin").string();
  save_checkpoint(bad, poisoned);
  c.max_steps = 20;
  Trainer t(c, dir.string());
  t.resume(bad);
  EXPECT_THROW(t.run(), NumericalError);
  EXPECT_EQ(slurp(ckpt), saved);
  std::filesystem::remove_all(dir);
}

TEST(Training, EvaluateRejectsIncompatibleTask) {
  Trainer t(small(BlockKind::mh_ssm));
  TaskSpec spec = t.config().task;
  spec.vocab = 5;
  EXPECT_THROW(t.evaluate(spec, 1), ConfigError);
  spec = t.config().task;
  spec.seq_len = 40;
  spec.lag = 9;
  EXPECT_GT(t.evaluate(spec, 1).total, 0u);
}
