#pragma once

#include <chrono>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhssm/checkpoint.hpp"
#include "mhssm/encoder.hpp"

namespace mhssm {

inline constexpr int kIgnoreIndex = -1;

enum class TaskKind { delayed_echo, selective_copy };

TaskKind parse_task_kind(const std::string& name);
std::string to_string(TaskKind k);

struct TaskSpec {
  TaskKind kind = TaskKind::delayed_echo;
  std::size_t seq_len = 256;
  std::size_t vocab = 8;
  std::size_t lag = 32;          // delayed_echo
  std::size_t num_markers = 8;   // selective_copy
  std::uint64_t seed = 1234;

  void validate() const;
  // One-hot width: vocab, plus blank and recall symbols for selective_copy.
  std::size_t input_dim() const;
};

struct TaskBatch {
  SeqBatch inputs;           // [batch, seq_len, input_dim], one-hot
  std::vector<int> targets;  // [batch * seq_len], kIgnoreIndex where undefined
};

// Deterministic in (spec.seed, batch_index).
TaskBatch generate_task(const TaskSpec& spec, std::size_t batch_size, std::uint64_t batch_index);

// target[t] = symbols[t - lag] for t >= lag, kIgnoreIndex before.
std::vector<int> delayed_echo_targets(std::span<const int> symbols, std::size_t lag);

struct Schedule {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 500;
  std::size_t hold_epochs = 10;
  double decay = 0.96;
};

// peak * min(1, step / warmup) * decay^max(0, epoch - hold). Steps count from 1,
// epochs from 0.
double lr_at(const Schedule& s, std::size_t step, std::size_t epoch);

/// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Throws NumericalError naming the first parameter with a non-finite
  // gradient; parameters are left untouched in that case.
  void step(ParameterSet& params, const NamedTensors& grads, double lr);

  std::size_t steps() const { return t_; }
  const NamedTensors& first_moments() const { return m_; }
  const NamedTensors& second_moments() const { return v_; }
  void restore(std::size_t t, NamedTensors m, NamedTensors v);

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  NamedTensors m_, v_;
};

// Rescales `grads` in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(NamedTensors& grads, double max_norm);

struct TrainConfig {
  EncoderConfig encoder;  // input_dim is taken from the task
  TaskSpec task;
  Schedule schedule;
  std::size_t batch_size = 32;
  std::size_t steps_per_epoch = 100;
  std::size_t max_steps = 5000;
  double clip_norm = 1.0;
  std::size_t eval_every = 100;
  std::size_t eval_batches = 4;
  std::size_t checkpoint_every = 500;
  double stop_at_accuracy = 0.0;  // early stop once eval accuracy reaches it; 0 disables
  bool fixed_batch = false;       // train on batch 0 every step
  std::uint64_t seed = 0;

  void validate() const;
};

// Flat JSON object; absent keys keep their defaults, unknown keys are errors.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
std::string to_json(const TrainConfig& cfg);
// Applies "key=value,key=value" or a JSON object to a task spec.
TaskSpec parse_task_overrides(const std::string& text, TaskSpec base);

/// Encoder followed by a per-frame linear head. A frame that covers s input
/// steps predicts s tokens.
class TokenModel {
 public:
  TokenModel(const TrainConfig& cfg, ParameterSet& params);
  // Logits [batch, frames * s, vocab].
  Var logits(Context& ctx, const SeqBatch& x) const;
  const Encoder& encoder() const { return encoder_; }

 private:
  Encoder encoder_;
  Linear head_;
  std::size_t vocab_, factor_;
};

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Logit rows beyond the task length are ignored.
Accuracy token_accuracy(const Tensor& logits, std::span<const int> targets, std::size_t seq_len);
// Targets padded with kIgnoreIndex to `padded_len` steps per sequence.
std::vector<int> pad_targets(std::span<const int> targets, std::size_t seq_len, std::size_t padded_len);

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double acc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<StepMetrics> log;
  std::vector<std::pair<std::size_t, double>> evals;  // (step, accuracy)
  double final_accuracy = 0.0;
  bool reached_target = false;
};

class Trainer {
 public:
  // `out_dir` receives metrics.csv, eval.csv and checkpoints; empty disables files.
  explicit Trainer(TrainConfig cfg, std::string out_dir = "");

  // Restores parameters, optimizer state and step from a checkpoint written
  // by save(). Mismatched parameter names or shapes are a ConfigError.
  void resume(const std::string& path);
  void save(const std::string& path) const;

  // One optimisation step on the next training batch.
  StepMetrics step();
  // Accuracy on held-out batches, eval mode.
  Accuracy evaluate() const;
  Accuracy evaluate(const TaskSpec& task, std::size_t batches) const;
  // Runs until max_steps or early stop. `on_step` observes each logged step.
  TrainResult run(const std::function<void(const StepMetrics&)>& on_step = {});

  std::size_t steps_done() const { return adam_.steps(); }
  const ParameterSet& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void append_csv(const std::string& file, const std::string& line) const;

  TrainConfig cfg_;
  std::string out_dir_;
  ParameterSet params_;
  TokenModel model_;
  Adam adam_;
  std::chrono::steady_clock::time_point start_;
};

// Checkpoint <-> trainer state helpers used by the CLI.
Checkpoint make_checkpoint(const TrainConfig& cfg, const ParameterSet& params, const Adam& adam);
TrainConfig checkpoint_config(const Checkpoint& ckpt);

// CSV line of a metrics row, optionally without the wall-time column.
std::string metrics_csv_row(const StepMetrics& m, bool with_seconds = true);
inline constexpr const char* kMetricsHeader = "step,epoch,lr,loss,acc,seconds";

}  // namespace mhssm
