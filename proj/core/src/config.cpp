#include "coe/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace coe {

using nlohmann::json;

std::string to_string(ResidualMode m) {
  switch (m) {
    case ResidualMode::kInner: return "inner";
    case ResidualMode::kOuter: return "outer";
    case ResidualMode::kInit: return "init";
    case ResidualMode::kNone: return "none";
  }
  return "inner";
}

std::string to_string(GatingMode m) {
  return m == GatingMode::kPerIteration ? "per_iteration" : "shared";
}

ResidualMode residual_mode_from(const std::string& s) {
  if (s == "inner") return ResidualMode::kInner;
  if (s == "outer") return ResidualMode::kOuter;
  if (s == "init") return ResidualMode::kInit;
  if (s == "none") return ResidualMode::kNone;
  throw ConfigError("unknown residual mode '" + s + "' (inner|outer|init|none)");
}

GatingMode gating_mode_from(const std::string& s) {
  if (s == "per_iteration") return GatingMode::kPerIteration;
  if (s == "shared") return GatingMode::kShared;
  throw ConfigError("unknown gating mode '" + s + "' (per_iteration|shared)");
}

void CoEConfig::validate() const {
  if (routed_experts < 1) throw ConfigError("coe: routed_experts must be >= 1");
  if (shared_experts < 0) throw ConfigError("coe: shared_experts must be >= 0");
  if (steps < 1) throw ConfigError("coe: steps must be >= 1");
  if (total_selections < 1) throw ConfigError("coe: total_selections must be >= 1");
  if (total_selections % steps != 0)
    throw ConfigError("coe: steps (" + std::to_string(steps) +
                      ") must divide total_selections (" + std::to_string(total_selections) + ")");
  if (total_selections / steps > routed_experts)
    throw ConfigError("coe: selections per step (" + std::to_string(total_selections / steps) +
                      ") exceeds routed_experts (" + std::to_string(routed_experts) + ")");
  if (ffn_hidden < 1) throw ConfigError("coe: ffn_hidden must be >= 1");
  if (hidden < 1) throw ConfigError("coe: hidden must be >= 1");
  if (load_balance_coeff < 0) throw ConfigError("coe: load_balance_coeff must be >= 0");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  if (hidden < 1) throw ConfigError("model: hidden must be >= 1");
  if (heads < 1 || hidden % heads != 0)
    throw ConfigError("model: hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  if ((hidden / heads) % 2 != 0)
    throw ConfigError("model: head dim must be even for rotary embeddings");
  if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
  if (max_seq < 1) throw ConfigError("model: max_seq must be >= 1");
  if (norm_eps < 0) throw ConfigError("model: norm_eps must be >= 0");
  if (coe.hidden != hidden)
    throw ConfigError("model: coe.hidden (" + std::to_string(coe.hidden) +
                      ") out of sync with model hidden (" + std::to_string(hidden) + ")");
  coe.validate();
}

void TrainConfig::validate() const {
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
    throw ConfigError("train: warmup_fraction must be in (0,1)");
  if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be > 0");
  if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (seq_len < 1) throw ConfigError("train: seq_len must be >= 1");
  if (learning_rate < 0) throw ConfigError("train: learning_rate must be >= 0");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ConfigError("train: betas must be in [0,1)");
  if (adam_eps <= 0) throw ConfigError("train: adam_eps must be > 0");
  if (precision != "f64" && precision != "f32")
    throw ConfigError("train: precision must be 'f64' or 'f32', got '" + precision + "'");
  if (eval_interval < 1) throw ConfigError("train: eval_interval must be >= 1");
  if (eval_windows < 1) throw ConfigError("train: eval_windows must be >= 1");
  if (checkpoint_interval < 0) throw ConfigError("train: checkpoint_interval must be >= 0");
  if (schedule != "linear" && schedule != "constant")
    throw ConfigError("train: schedule must be 'linear' or 'constant', got '" + schedule + "'");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("train: val_fraction must be in (0,1)");
}

void DataConfig::validate() const {
  if (task != "bytes" && task != "copy")
    throw ConfigError("data: task must be 'bytes' or 'copy', got '" + task + "'");
  if (task == "bytes" && path.empty()) throw ConfigError("data: bytes task needs a corpus path");
  if (copy_alphabet < 2 || copy_alphabet > 256)
    throw ConfigError("data: copy_alphabet must be in [2,256]");
  if (copy_period < 1) throw ConfigError("data: copy_period must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (train.seq_len > model.max_seq)
    throw ConfigError("train: seq_len (" + std::to_string(train.seq_len) + ") exceeds model max_seq (" +
                      std::to_string(model.max_seq) + ")");
}

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

CoEConfig coe_from_json(const json& j, int model_hidden) {
  CoEConfig c;
  c.hidden = model_hidden;
  reject_unknown_keys(j,
                      {"routed_experts", "shared_experts", "total_selections", "steps", "residual",
                       "gating", "ffn_hidden", "load_balance_coeff"},
                      "model.coe");
  read(j, "routed_experts", c.routed_experts);
  read(j, "shared_experts", c.shared_experts);
  read(j, "total_selections", c.total_selections);
  read(j, "steps", c.steps);
  read(j, "ffn_hidden", c.ffn_hidden);
  read(j, "load_balance_coeff", c.load_balance_coeff);
  if (j.contains("residual")) c.residual_mode = residual_mode_from(j.at("residual").get<std::string>());
  if (j.contains("gating")) c.gating_mode = gating_mode_from(j.at("gating").get<std::string>());
  return c;
}

json coe_to_json(const CoEConfig& c) {
  return json{{"routed_experts", c.routed_experts},
              {"shared_experts", c.shared_experts},
              {"total_selections", c.total_selections},
              {"steps", c.steps},
              {"residual", to_string(c.residual_mode)},
              {"gating", to_string(c.gating_mode)},
              {"ffn_hidden", c.ffn_hidden},
              {"load_balance_coeff", c.load_balance_coeff}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  reject_unknown_keys(j, {"layers", "hidden", "heads", "vocab", "max_seq", "norm_eps", "coe"},
                      "model");
  read(j, "layers", m.layers);
  read(j, "hidden", m.hidden);
  read(j, "heads", m.heads);
  read(j, "vocab", m.vocab);
  read(j, "max_seq", m.max_seq);
  read(j, "norm_eps", m.norm_eps);
  m.coe = coe_from_json(j.contains("coe") ? j.at("coe") : json::object(), m.hidden);
  return m;
}

json model_to_json(const ModelConfig& m) {
  return json{{"layers", m.layers},   {"hidden", m.hidden},     {"heads", m.heads},
              {"vocab", m.vocab},     {"max_seq", m.max_seq},   {"norm_eps", m.norm_eps},
              {"coe", coe_to_json(m.coe)}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  reject_unknown_keys(j,
                      {"learning_rate", "weight_decay", "beta1", "beta2", "adam_eps",
                       "warmup_fraction", "total_steps", "batch_size", "seq_len", "clip_norm",
                       "seed", "precision", "eval_interval", "eval_windows", "checkpoint_interval",
                       "schedule", "val_fraction", "trace_during_training"},
                      "train");
  read(j, "learning_rate", t.learning_rate);
  read(j, "weight_decay", t.weight_decay);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "adam_eps", t.adam_eps);
  read(j, "warmup_fraction", t.warmup_fraction);
  read(j, "total_steps", t.total_steps);
  read(j, "batch_size", t.batch_size);
  read(j, "seq_len", t.seq_len);
  read(j, "clip_norm", t.clip_norm);
  read(j, "seed", t.seed);
  read(j, "precision", t.precision);
  read(j, "eval_interval", t.eval_interval);
  read(j, "eval_windows", t.eval_windows);
  read(j, "checkpoint_interval", t.checkpoint_interval);
  read(j, "schedule", t.schedule);
  read(j, "val_fraction", t.val_fraction);
  read(j, "trace_during_training", t.trace_during_training);
  return t;
}

json train_to_json(const TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate},
              {"weight_decay", t.weight_decay},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"warmup_fraction", t.warmup_fraction},
              {"total_steps", t.total_steps},
              {"batch_size", t.batch_size},
              {"seq_len", t.seq_len},
              {"clip_norm", t.clip_norm},
              {"seed", t.seed},
              {"precision", t.precision},
              {"eval_interval", t.eval_interval},
              {"eval_windows", t.eval_windows},
              {"checkpoint_interval", t.checkpoint_interval},
              {"schedule", t.schedule},
              {"val_fraction", t.val_fraction},
              {"trace_during_training", t.trace_during_training}};
}

DataConfig data_from_json(const json& j) {
  DataConfig d;
  reject_unknown_keys(j, {"task", "path", "copy_alphabet", "copy_period"}, "data");
  read(j, "task", d.task);
  read(j, "path", d.path);
  read(j, "copy_alphabet", d.copy_alphabet);
  read(j, "copy_period", d.copy_period);
  return d;
}

json data_to_json(const DataConfig& d) {
  return json{{"task", d.task},
              {"path", d.path},
              {"copy_alphabet", d.copy_alphabet},
              {"copy_period", d.copy_period}};
}

AnalysisConfig analysis_from_json(const json& j) {
  AnalysisConfig a;
  reject_unknown_keys(j, {"out_dir"}, "analysis");
  read(j, "out_dir", a.out_dir);
  return a;
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown_keys(j, {"model", "train", "data", "analysis"}, "config root");
  RunConfig cfg;
  cfg.model = model_from_json(j.contains("model") ? j.at("model") : json::object());
  cfg.train = train_from_json(j.contains("train") ? j.at("train") : json::object());
  cfg.data = data_from_json(j.contains("data") ? j.at("data") : json::object());
  cfg.analysis = analysis_from_json(j.contains("analysis") ? j.at("analysis") : json::object());
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_config_from_json_text(ss.str());
}

std::string run_config_to_json_text(const RunConfig& cfg) {
  json j{{"model", model_to_json(cfg.model)},
         {"train", train_to_json(cfg.train)},
         {"data", data_to_json(cfg.data)},
         {"analysis", json{{"out_dir", cfg.analysis.out_dir}}}};
  return j.dump(2) + "\n";
}

ParamCounts param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t L = cfg.layers, d = cfg.hidden, V = cfg.vocab;
  const std::int64_t N = cfg.coe.routed_experts, M = cfg.coe.shared_experts;
  const std::int64_t h = cfg.coe.ffn_hidden;
  ParamCounts pc;
  pc.routed_experts = N * L * 3 * d * h;
  pc.shared_experts = M * L * 3 * d * h;
  pc.routers = static_cast<std::int64_t>(cfg.coe.router_count()) * L * N * d;
  pc.attention = 4 * L * d * d;
  pc.norms = (2 * L + 1) * d;
  pc.embedding = V * d;
  pc.head = d * V;
  return pc;
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
  if (step < 0 || step > cfg.total_steps)
    throw UsageError("lr_at: step " + std::to_string(step) + " outside [0," +
                     std::to_string(cfg.total_steps) + "]");
  const double warmup = cfg.warmup_fraction * static_cast<double>(cfg.total_steps);
  const auto s = static_cast<double>(step);
  if (s <= warmup) return cfg.learning_rate * s / warmup;
  if (cfg.schedule == "constant") return cfg.learning_rate;
  const auto total = static_cast<double>(cfg.total_steps);
  return cfg.learning_rate * (total - s) / (total - warmup);
}

}  // namespace coe
