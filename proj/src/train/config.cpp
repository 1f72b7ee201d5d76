#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mhssm/train.hpp"

namespace mhssm {

namespace {

using json = nlohmann::json;

std::size_t as_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer, got " + v.dump());
  }
  return v.get<std::size_t>();
}

double as_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number, got " + v.dump());
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string, got " + v.dump());
  return v.get<std::string>();
}

InitScheme parse_init(const std::string& s) {
  if (s == "s4d_lin") return InitScheme::s4d_lin;
  if (s == "random_stable") return InitScheme::random_stable;
  throw ConfigError("unknown init '" + s + "' (expected s4d_lin or random_stable)");
}

std::string init_name(InitScheme s) { return s == InitScheme::s4d_lin ? "s4d_lin" : "random_stable"; }

using Setter = std::function<void(TrainConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& task_setters() {
  static const std::map<std::string, Setter> m = {
      {"task", [](TrainConfig& c, const json& v, const std::string& k) { c.task.kind = parse_task_kind(as_string(v, k)); }},
      {"seq_len", [](TrainConfig& c, const json& v, const std::string& k) { c.task.seq_len = as_count(v, k); }},
      {"vocab", [](TrainConfig& c, const json& v, const std::string& k) { c.task.vocab = as_count(v, k); }},
      {"lag", [](TrainConfig& c, const json& v, const std::string& k) { c.task.lag = as_count(v, k); }},
      {"num_markers", [](TrainConfig& c, const json& v, const std::string& k) { c.task.num_markers = as_count(v, k); }},
      {"task_seed", [](TrainConfig& c, const json& v, const std::string& k) { c.task.seed = as_count(v, k); }},
  };
  return m;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m = [] {
    std::map<std::string, Setter> s = task_setters();
    auto count = [](std::size_t TrainConfig::*f) {
      return [f](TrainConfig& c, const json& v, const std::string& k) { c.*f = as_count(v, k); };
    };
    s["frontend"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.frontend = parse_frontend(as_string(v, k)); };
    s["block_kind"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.block_kind = parse_block_kind(as_string(v, k)); };
    s["model_dim"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.model_dim = as_count(v, k); };
    s["num_layers"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.num_layers = as_count(v, k); };
    s["attn_heads"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.attn_heads = as_count(v, k); };
    s["ffn_dim"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.ffn_dim = as_count(v, k); };
    s["dropout"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.dropout = as_number(v, k); };
    s["heads"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.mh_ssm.heads = as_count(v, k); };
    s["stack"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.mh_ssm.stack = as_count(v, k); };
    s["state_dim"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.mh_ssm.state_dim = as_count(v, k); };
    s["gating"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.mh_ssm.gating = parse_gating(as_string(v, k)); };
    s["init"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.mh_ssm.init = parse_init(as_string(v, k)); };
    s["frontend_heads"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.frontend_ssm.heads = as_count(v, k); };
    s["frontend_stack"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.frontend_ssm.stack = as_count(v, k); };
    s["frontend_state_dim"] = [](TrainConfig& c, const json& v, const std::string& k) { c.encoder.frontend_ssm.state_dim = as_count(v, k); };
    s["peak_lr"] = [](TrainConfig& c, const json& v, const std::string& k) { c.schedule.peak_lr = as_number(v, k); };
    s["warmup_steps"] = [](TrainConfig& c, const json& v, const std::string& k) { c.schedule.warmup_steps = as_count(v, k); };
    s["hold_epochs"] = [](TrainConfig& c, const json& v, const std::string& k) { c.schedule.hold_epochs = as_count(v, k); };
    s["decay"] = [](TrainConfig& c, const json& v, const std::string& k) { c.schedule.decay = as_number(v, k); };
    s["batch_size"] = count(&TrainConfig::batch_size);
    s["steps_per_epoch"] = count(&TrainConfig::steps_per_epoch);
    s["max_steps"] = count(&TrainConfig::max_steps);
    s["eval_every"] = count(&TrainConfig::eval_every);
    s["eval_batches"] = count(&TrainConfig::eval_batches);
    s["checkpoint_every"] = count(&TrainConfig::checkpoint_every);
    s["clip_norm"] = [](TrainConfig& c, const json& v, const std::string& k) { c.clip_norm = as_number(v, k); };
    s["stop_at_accuracy"] = [](TrainConfig& c, const json& v, const std::string& k) { c.stop_at_accuracy = as_number(v, k); };
    s["fixed_batch"] = [](TrainConfig& c, const json& v, const std::string& k) {
      if (!v.is_boolean()) throw ConfigError("config key '" + k + "' must be true or false, got " + v.dump());
      c.fixed_batch = v.get<bool>();
    };
    s["seed"] = [](TrainConfig& c, const json& v, const std::string& k) { c.seed = as_count(v, k); };
    return s;
  }();
  return m;
}

json parse_object(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  return j;
}

void apply(TrainConfig& c, const json& j, const std::map<std::string, Setter>& table) {
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(c, value, key);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  TrainConfig c;
  apply(c, parse_object(json_text), setters());
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) { return parse_train_config(read_file(path)); }

std::string to_json(const TrainConfig& c) {
  const EncoderConfig& e = c.encoder;
  json j = {
      {"task", to_string(c.task.kind)},
      {"seq_len", c.task.seq_len},
      {"vocab", c.task.vocab},
      {"lag", c.task.lag},
      {"num_markers", c.task.num_markers},
      {"task_seed", c.task.seed},
      {"frontend", to_string(e.frontend)},
      {"block_kind", to_string(e.block_kind)},
      {"model_dim", e.model_dim},
      {"num_layers", e.num_layers},
      {"attn_heads", e.attn_heads},
      {"ffn_dim", e.ffn_dim},
      {"dropout", e.dropout},
      {"heads", e.mh_ssm.heads},
      {"stack", e.mh_ssm.stack},
      {"state_dim", e.mh_ssm.state_dim},
      {"gating", to_string(e.mh_ssm.gating)},
      {"init", init_name(e.mh_ssm.init)},
      {"frontend_heads", e.frontend_ssm.heads},
      {"frontend_stack", e.frontend_ssm.stack},
      {"frontend_state_dim", e.frontend_ssm.state_dim},
      {"peak_lr", c.schedule.peak_lr},
      {"warmup_steps", c.schedule.warmup_steps},
      {"hold_epochs", c.schedule.hold_epochs},
      {"decay", c.schedule.decay},
      {"batch_size", c.batch_size},
      {"steps_per_epoch", c.steps_per_epoch},
      {"max_steps", c.max_steps},
      {"eval_every", c.eval_every},
      {"eval_batches", c.eval_batches},
      {"checkpoint_every", c.checkpoint_every},
      {"clip_norm", c.clip_norm},
      {"stop_at_accuracy", c.stop_at_accuracy},
      {"fixed_batch", c.fixed_batch},
      {"seed", c.seed},
  };
  return j.dump(2);
}

TaskSpec parse_task_overrides(const std::string& text, TaskSpec base) {
  TrainConfig c;
  c.task = base;
  std::string body = text;
  if (!body.empty() && body.front() != '{' && std::filesystem::is_regular_file(body)) body = read_file(body);
  if (!body.empty() && body.front() == '{') {
    apply(c, parse_object(body), task_setters());
  } else {
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("task override '" + item + "' is not key=value");
      const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
      json v;
      if (key == "task") {
        v = value;
      } else {
        try {
          v = json::parse(value);
        } catch (const json::parse_error&) {
          throw ConfigError("task override '" + item + "' has a malformed value");
        }
      }
      apply(c, json{{key, v}}, task_setters());
    }
  }
  c.task.validate();
  return c.task;
}

}  // namespace mhssm
