#pragma once

#include <cstdint>
#include <string>

#include "coe/error.hpp"

namespace coe {

enum class ResidualMode { kInner, kOuter, kInit, kNone };
enum class GatingMode { kPerIteration, kShared };

std::string to_string(ResidualMode m);
std::string to_string(GatingMode m);
ResidualMode residual_mode_from(const std::string& s);
GatingMode gating_mode_from(const std::string& s);

// Shape of one chained-expert layer. `total_selections` is the expert budget
// per token per layer; each of the `steps` routing passes picks
// total_selections/steps experts.
struct CoEConfig {
  int routed_experts = 8;       // N
  int shared_experts = 1;       // M
  int total_selections = 4;     // K
  int steps = 2;                // C
  ResidualMode residual_mode = ResidualMode::kInner;
  GatingMode gating_mode = GatingMode::kPerIteration;
  int ffn_hidden = 256;         // h, expert intermediate size
  int hidden = 128;             // d, filled in from the model config
  double load_balance_coeff = 0.0;  // optional auxiliary penalty, off by default

  int selections_per_step() const { return total_selections / steps; }
  int router_count() const { return gating_mode == GatingMode::kPerIteration ? steps : 1; }
  void validate() const;
};

struct ModelConfig {
  int layers = 4;
  int hidden = 128;
  int heads = 8;
  int vocab = 256;
  int max_seq = 512;
  double norm_eps = 1e-6;
  CoEConfig coe;
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.10;
  std::int64_t total_steps = 1000;
  int batch_size = 64;
  int seq_len = 512;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::string precision = "f64";    // "f64" | "f32"
  std::int64_t eval_interval = 100;
  int eval_windows = 8;
  std::int64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  std::string schedule = "linear";  // "linear" decay to zero | "constant" after warmup
  double val_fraction = 0.02;
  bool trace_during_training = false;
  void validate() const;
};

struct DataConfig {
  std::string task = "bytes";  // "bytes" | "copy"
  std::string path;            // corpus file for the bytes task
  int copy_alphabet = 64;
  int copy_period = 8;
  void validate() const;
};

struct AnalysisConfig {
  std::string out_dir = ".";
};

// One experiment, fully resolved. Every field has a default, so `{}` is a
// valid config file; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  AnalysisConfig analysis;
  void validate() const;
};

RunConfig run_config_from_json_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json_text(const RunConfig& cfg);

// Exact integer parameter counts implied by a model configuration.
struct ParamCounts {
  std::int64_t routed_experts = 0;  // N·L·3dh
  std::int64_t shared_experts = 0;  // M·L·3dh
  std::int64_t routers = 0;         // (C or 1)·L·N·d
  std::int64_t attention = 0;       // 4·L·d²
  std::int64_t norms = 0;           // (2L+1)·d
  std::int64_t embedding = 0;       // V·d
  std::int64_t head = 0;            // d·V, untied
  std::int64_t total() const {
    return routed_experts + shared_experts + routers + attention + norms + embedding + head;
  }
  std::int64_t non_embedding() const { return total() - embedding - head; }
};

ParamCounts param_count(const ModelConfig& cfg);

// Linear warmup to the peak rate, then linear decay to zero at `total_steps`
// ("constant" holds the peak after warmup instead).
double lr_at(const TrainConfig& cfg, std::int64_t step);

}  // namespace coe
