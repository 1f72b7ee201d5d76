#include "mhssm/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mhssm {

TaskKind parse_task_kind(const std::string& name) {
  if (name == "delayed_echo") return TaskKind::delayed_echo;
  if (name == "selective_copy") return TaskKind::selective_copy;
  throw ConfigError("unknown task '" + name + "' (expected delayed_echo or selective_copy)");
}

std::string to_string(TaskKind k) {
  return k == TaskKind::delayed_echo ? "delayed_echo" : "selective_copy";
}

void TaskSpec::validate() const {
  if (vocab < 2) throw ConfigError("task: vocab must be >= 2");
  if (seq_len < 1) throw ConfigError("task: seq_len must be >= 1");
  if (kind == TaskKind::delayed_echo && lag >= seq_len) {
    throw ConfigError("task: lag " + std::to_string(lag) + " must be < seq_len " + std::to_string(seq_len));
  }
  if (kind == TaskKind::selective_copy && (num_markers < 1 || 2 * num_markers > seq_len)) {
    throw ConfigError("task: num_markers must be in [1, seq_len/2], got " + std::to_string(num_markers));
  }
}

std::size_t TaskSpec::input_dim() const {
  return kind == TaskKind::delayed_echo ? vocab : vocab + 2;
}

std::vector<int> delayed_echo_targets(std::span<const int> symbols, std::size_t lag) {
  std::vector<int> t(symbols.size(), kIgnoreIndex);
  for (std::size_t i = lag; i < symbols.size(); ++i) t[i] = symbols[i - lag];
  return t;
}

TaskBatch generate_task(const TaskSpec& spec, std::size_t batch_size, std::uint64_t batch_index) {
  spec.validate();
  const std::size_t len = spec.seq_len, dim = spec.input_dim();
  TaskBatch out;
  out.inputs.data = Tensor({batch_size, len, dim});
  out.inputs.lengths.assign(batch_size, len);
  out.targets.reserve(batch_size * len);
  auto x = out.inputs.data.mutable_data();
  Rng rng(mix_seed(spec.seed, batch_index));
  std::uniform_int_distribution<int> symbol(0, static_cast<int>(spec.vocab) - 1);

  for (std::size_t b = 0; b < batch_size; ++b) {
    std::vector<int> in(len);
    std::vector<int> target;
    if (spec.kind == TaskKind::delayed_echo) {
      for (auto& s : in) s = symbol(rng);
      target = delayed_echo_targets(in, spec.lag);
    } else {
      const std::size_t m = spec.num_markers, body = len - m;
      std::vector<std::size_t> slots(body);
      std::iota(slots.begin(), slots.end(), 0);
      for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, body - 1);
        std::swap(slots[i], slots[pick(rng)]);
      }
      std::sort(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(m));
      std::fill(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(body), static_cast<int>(spec.vocab));
      std::fill(in.begin() + static_cast<std::ptrdiff_t>(body), in.end(), static_cast<int>(spec.vocab + 1));
      target.assign(len, kIgnoreIndex);
      for (std::size_t i = 0; i < m; ++i) {
        const int s = symbol(rng);
        in[slots[i]] = s;
        target[body + i] = s;
      }
    }
    for (std::size_t t = 0; t < len; ++t) x[(b * len + t) * dim + static_cast<std::size_t>(in[t])] = 1.0;
    out.targets.insert(out.targets.end(), target.begin(), target.end());
  }
  return out;
}

double lr_at(const Schedule& s, std::size_t step, std::size_t epoch) {
  double lr = s.peak_lr;
  if (s.warmup_steps > 0 && step < s.warmup_steps) {
    lr *= static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (epoch > s.hold_epochs) lr *= std::pow(s.decay, static_cast<double>(epoch - s.hold_epochs));
  return lr;
}

void Adam::step(ParameterSet& params, const NamedTensors& grads, double lr) {
  for (const auto& name : params.names()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("adam: no gradient for parameter " + name);
    if (it->second.shape() != params.get(name).shape()) {
      throw DimensionError("adam: gradient of " + name + " has shape " + to_string(it->second.shape()) +
                           ", parameter has " + to_string(params.get(name).shape()));
    }
    if (!it->second.all_finite()) throw NumericalError("non-finite gradient for parameter " + name);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    const Tensor& g = grads.at(name);
    Tensor p = params.get(name);
    auto [mi, m_new] = m_.try_emplace(name, Tensor::zeros(p.shape()));
    auto [vi, v_new] = v_.try_emplace(name, Tensor::zeros(p.shape()));
    auto m = mi->second.mutable_data();
    auto v = vi->second.mutable_data();
    auto pv = p.mutable_data();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      pv[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    params.set(name, std::move(p));
  }
}

void Adam::restore(std::size_t t, NamedTensors m, NamedTensors v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_grad_norm(NamedTensors& grads, double max_norm) {
  std::vector<std::string> names;
  for (const auto& [n, g] : grads) names.push_back(n);
  std::sort(names.begin(), names.end());
  double sq = 0;
  for (const auto& n : names)
    for (double v : grads.at(n).data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [n, g] : grads)
      for (double& v : g.mutable_data()) v *= s;
  }
  return norm;
}

void TrainConfig::validate() const {
  task.validate();
  EncoderConfig e = encoder;
  e.input_dim = task.input_dim();
  e.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_batches < 1) throw ConfigError("eval_batches must be >= 1");
  if (!(schedule.peak_lr > 0)) throw ConfigError("peak_lr must be > 0");
  if (!(schedule.decay > 0 && schedule.decay <= 1)) throw ConfigError("decay must be in (0, 1]");
}

TokenModel::TokenModel(const TrainConfig& cfg, ParameterSet& params)
    : encoder_([&] {
        EncoderConfig e = cfg.encoder;
        e.input_dim = cfg.task.input_dim();
        e.seed = cfg.seed;
        return e;
      }(), params),
      vocab_(cfg.task.vocab),
      factor_(cfg.encoder.subsampling()) {
  Rng rng(mix_seed(cfg.seed, 0x4ead));
  head_ = Linear(params, "head", cfg.encoder.model_dim, factor_ * vocab_, rng);
}

Var TokenModel::logits(Context& ctx, const SeqBatch& x) const {
  SeqVar h = encoder_(ctx, ctx.constant(x.data), x.lengths);
  Var y = head_(ctx, h.data);
  const Shape& s = y.shape();
  return reshape(y, {s[0], s[1] * factor_, vocab_});
}

std::vector<int> pad_targets(std::span<const int> targets, std::size_t seq_len, std::size_t padded_len) {
  if (seq_len == 0 || targets.size() % seq_len != 0 || padded_len < seq_len) {
    throw DimensionError("pad_targets: " + std::to_string(targets.size()) + " targets do not tile length " +
                         std::to_string(seq_len) + " into " + std::to_string(padded_len));
  }
  const std::size_t batch = targets.size() / seq_len;
  std::vector<int> out(batch * padded_len, kIgnoreIndex);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(targets.begin() + static_cast<std::ptrdiff_t>(b * seq_len), seq_len,
                out.begin() + static_cast<std::ptrdiff_t>(b * padded_len));
  return out;
}

Accuracy token_accuracy(const Tensor& logits, std::span<const int> targets, std::size_t seq_len) {
  const std::size_t padded = logits.dim(1);
  const std::vector<int> t = pad_targets(targets, seq_len, padded);
  const std::vector<int> pred = argmax_last(logits);
  Accuracy a;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] == kIgnoreIndex) continue;
    ++a.total;
    a.correct += pred[i] == t[i];
  }
  return a;
}

namespace {

constexpr std::uint64_t kEvalBatchOffset = std::uint64_t{1} << 40;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_row(const StepMetrics& m, bool with_seconds) {
  std::string s = std::to_string(m.step) + "," + std::to_string(m.epoch) + "," + fmt_double(m.lr) + "," +
                  fmt_double(m.loss) + "," + fmt_double(m.acc);
  if (with_seconds) {
    char buf[32];
    std::snprintf(buf, sizeof buf, ",%.3f", m.seconds);
    s += buf;
  }
  return s;
}

Trainer::Trainer(TrainConfig cfg, std::string out_dir)
    : cfg_((cfg.validate(), std::move(cfg))),
      out_dir_(std::move(out_dir)),
      model_(cfg_, params_),
      start_(std::chrono::steady_clock::now()) {
  if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
}

StepMetrics Trainer::step() {
  StepMetrics m;
  m.step = adam_.steps() + 1;
  m.epoch = (m.step - 1) / cfg_.steps_per_epoch;
  m.lr = lr_at(cfg_.schedule, m.step, m.epoch);

  const TaskBatch batch = generate_task(cfg_.task, cfg_.batch_size, cfg_.fixed_batch ? 0 : m.step - 1);
  Context ctx(params_, Mode::train, mix_seed(cfg_.seed, m.step));
  Var logits = model_.logits(ctx, batch.inputs);
  const std::vector<int> targets = pad_targets(batch.targets, cfg_.task.seq_len, logits.shape()[1]);
  Var loss = cross_entropy(logits, targets, kIgnoreIndex);
  m.loss = loss.value().item();
  if (!std::isfinite(m.loss)) {
    throw NumericalError("loss is non-finite at step " + std::to_string(m.step));
  }
  NamedTensors grads = ctx.gradients(loss);
  for (const auto& name : params_.names()) {
    if (!grads.at(name).all_finite()) {
      throw NumericalError("non-finite gradient for parameter " + name + " at step " + std::to_string(m.step));
    }
  }
  clip_grad_norm(grads, cfg_.clip_norm);
  adam_.step(params_, grads, m.lr);
  m.acc = token_accuracy(logits.value(), batch.targets, cfg_.task.seq_len).value();
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  return m;
}

Accuracy Trainer::evaluate() const { return evaluate(cfg_.task, cfg_.eval_batches); }

Accuracy Trainer::evaluate(const TaskSpec& task, std::size_t batches) const {
  if (task.input_dim() != cfg_.task.input_dim() || task.vocab != cfg_.task.vocab) {
    throw ConfigError("evaluate: task input_dim/vocab (" + std::to_string(task.input_dim()) + "/" +
                      std::to_string(task.vocab) + ") do not match the model (" +
                      std::to_string(cfg_.task.input_dim()) + "/" + std::to_string(cfg_.task.vocab) + ")");
  }
  Accuracy total;
  for (std::size_t i = 0; i < batches; ++i) {
    const TaskBatch batch = generate_task(task, cfg_.batch_size, kEvalBatchOffset + i);
    Context ctx(params_, Mode::eval);
    Var logits = model_.logits(ctx, batch.inputs);
    Accuracy a = token_accuracy(logits.value(), batch.targets, task.seq_len);
    total.correct += a.correct;
    total.total += a.total;
  }
  return total;
}

void Trainer::append_csv(const std::string& file, const std::string& line) const {
  if (out_dir_.empty()) return;
  const auto path = std::filesystem::path(out_dir_) / file;
  std::ofstream f(path, std::ios::app);
  f << line << '\n';
}

TrainResult Trainer::run(const std::function<void(const StepMetrics&)>& on_step) {
  TrainResult r;
  if (!out_dir_.empty()) {
    const auto metrics = std::filesystem::path(out_dir_) / "metrics.csv";
    if (!std::filesystem::exists(metrics)) append_csv("metrics.csv", kMetricsHeader);
    const auto evals = std::filesystem::path(out_dir_) / "eval.csv";
    if (!std::filesystem::exists(evals)) append_csv("eval.csv", "step,acc");
  }
  const std::string ckpt = out_dir_.empty() ? "" : (std::filesystem::path(out_dir_) / "checkpoint.bin").string();
  while (adam_.steps() < cfg_.max_steps) {
    StepMetrics m = step();
    r.log.push_back(m);
    append_csv("metrics.csv", metrics_csv_row(m));
    if (on_step) on_step(m);
    const bool last = adam_.steps() == cfg_.max_steps;
    if (m.step % cfg_.eval_every == 0 || last) {
      const double acc = evaluate().value();
      r.evals.emplace_back(m.step, acc);
      r.final_accuracy = acc;
      append_csv("eval.csv", std::to_string(m.step) + "," + fmt_double(acc));
      if (cfg_.stop_at_accuracy > 0 && acc >= cfg_.stop_at_accuracy) {
        r.reached_target = true;
        break;
      }
    }
    if (!ckpt.empty() && cfg_.checkpoint_every > 0 && m.step % cfg_.checkpoint_every == 0) save(ckpt);
  }
  if (!ckpt.empty()) save(ckpt);
  return r;
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const ParameterSet& params, const Adam& adam) {
  Checkpoint c;
  for (const auto& n : params.names()) c.tensors.emplace_back("param/" + n, params.get(n));
  for (const auto& n : params.names()) {
    auto m = adam.first_moments().find(n);
    auto v = adam.second_moments().find(n);
    if (m != adam.first_moments().end()) c.tensors.emplace_back("adam.m/" + n, m->second);
    if (v != adam.second_moments().end()) c.tensors.emplace_back("adam.v/" + n, v->second);
  }
  c.tensors.emplace_back("adam.step", Tensor::scalar(static_cast<double>(adam.steps())));
  c.blobs.emplace_back("__config__", to_json(cfg));
  return c;
}

TrainConfig checkpoint_config(const Checkpoint& ckpt) {
  const std::string* cfg = ckpt.find_blob("__config__");
  if (!cfg) throw ConfigError("checkpoint has no __config__ entry");
  return parse_train_config(*cfg);
}

void Trainer::save(const std::string& path) const {
  save_checkpoint(path, make_checkpoint(cfg_, params_, adam_));
}

void Trainer::resume(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  for (const auto& n : params_.names()) {
    const Tensor* t = c.find_tensor("param/" + n);
    if (!t) throw ConfigError("checkpoint " + path + " lacks parameter " + n);
    if (t->shape() != params_.get(n).shape()) {
      throw ConfigError("checkpoint " + path + ": parameter " + n + " has shape " + to_string(t->shape()) +
                        ", model expects " + to_string(params_.get(n).shape()));
    }
  }
  std::size_t stored = 0;
  for (const auto& [name, t] : c.tensors)
    if (name.rfind("param/", 0) == 0) ++stored;
  if (stored != params_.num_tensors()) {
    throw ConfigError("checkpoint " + path + " holds " + std::to_string(stored) + " parameters, model has " +
                      std::to_string(params_.num_tensors()));
  }
  NamedTensors m, v;
  for (const auto& n : params_.names()) {
    params_.set(n, *c.find_tensor("param/" + n));
    if (const Tensor* t = c.find_tensor("adam.m/" + n)) m.emplace(n, *t);
    if (const Tensor* t = c.find_tensor("adam.v/" + n)) v.emplace(n, *t);
  }
  const Tensor* st = c.find_tensor("adam.step");
  adam_.restore(st ? static_cast<std::size_t>(st->item()) : 0, std::move(m), std::move(v));
}

}  // namespace mhssm
