#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "coe/checkpoint.hpp"
#include "coe/data.hpp"
#include "coe/model.hpp"

namespace coe {

// Decoupled-weight-decay Adam. Moments live per parameter, in registration
// order; the step counter drives bias correction.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterStore<T>& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
    for (auto& p : params) {
      m_.emplace_back(p.tensor.shape());
      v_.emplace_back(p.tensor.shape());
    }
  }

  // p ← p − rate·m̂/(√v̂+ε) − rate·wd·p, with NaN-gradient detection.
  void step(double rate) {
    ++steps_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T corr1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(steps_)));
    const T corr2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(steps_)));
    const T eps = static_cast<T>(cfg_.adam_eps);
    const T r = static_cast<T>(rate);
    std::size_t idx = 0;
    for (auto& p : *params_) {
      auto theta = p.tensor.data();
      auto grad = p.tensor.grad();
      auto m = m_[idx].data();
      auto v = v_[idx].data();
      ++idx;
      if (!p.trainable) continue;
      const T wd = p.decay ? static_cast<T>(cfg_.weight_decay) : T(0);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const T g = grad[i];
        if (std::isnan(g))
          throw NumericError("adamw: NaN gradient in parameter '" + p.name + "'");
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const T mhat = m[i] / corr1;
        const T vhat = v[i] / corr2;
        theta[i] -= r * mhat / (std::sqrt(vhat) + eps) + r * wd * theta[i];
      }
    }
  }

  std::int64_t step_count() const { return steps_; }
  void set_step_count(std::int64_t s) { steps_ = s; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }

 private:
  ParameterStore<T>* params_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t steps_ = 0;
};

struct ClipResult {
  double norm = 0.0;   // pre-clip global L2 norm
  double scale = 1.0;  // factor applied to every gradient
};

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm; returns the applied scale.
template <typename T>
ClipResult clip_global_norm(ParameterStore<T>& params, double max_norm) {
  if (max_norm <= 0) throw UsageError("clip_global_norm: max_norm must be > 0");
  double sq = 0;
  for (auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  ClipResult r;
  r.norm = std::sqrt(sq);
  if (r.norm > max_norm) {
    r.scale = max_norm / r.norm;
    const T s = static_cast<T>(r.scale);
    for (auto& p : params)
      for (auto& g : p.tensor.grad()) g *= s;
  }
  return r;
}

struct MetricsRecord {
  std::int64_t step = 0;
  std::string split;  // "train" | "val"
  double loss = 0.0;
  double lr = 0.0;
  std::int64_t tokens_seen = 0;
  double grad_norm = 0.0;
};

// JSON-lines metrics file, flushed per record so a crash loses at most one.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw IoError("metrics: cannot open '" + path + "'");
  }
  void append(const MetricsRecord& r) {
    nlohmann::json j{{"step", r.step},           {"split", r.split},
                     {"loss", r.loss},           {"lr", r.lr},
                     {"tokens_seen", r.tokens_seen}, {"grad_norm", r.grad_norm}};
    out_ << j.dump() << "\n";
    if (!out_.flush()) throw IoError("metrics: write failed");
  }

 private:
  std::ofstream out_;
};

// Mean next-token loss of one batch; one forward per sequence row.
template <typename T>
Tensor<T> batch_loss(Model<T>& model, const Batch& batch, std::type_identity_t<Tape<T>>* tape, bool capture_trace,
                     std::vector<RoutingTrace>* traces_out = nullptr,
                     InvocationCounter* counter = nullptr) {
  Tensor<T> total;
  for (int b = 0; b < batch.batch; ++b) {
    auto fwd = model.forward(batch.input_row(b), tape, capture_trace, counter);
    auto row_targets = batch.target_row(b);
    std::vector<std::int64_t> targets(row_targets.begin(), row_targets.end());
    auto loss = cross_entropy(fwd.logits, targets, tape);
    if (fwd.aux_loss.defined()) loss = add(loss, fwd.aux_loss, tape);
    total = total.defined() ? add(total, loss, tape) : loss;
    if (traces_out)
      for (auto& tr : fwd.traces) traces_out->push_back(std::move(tr));
  }
  return scale(total, T(1) / static_cast<T>(batch.batch), tape);
}

// Mean loss over the fixed validation batches (forward only).
template <typename T>
double evaluate(Model<T>& model, const DataStream& data, const TrainConfig& cfg,
                std::vector<RoutingTrace>* traces_out = nullptr,
                std::int64_t* tokens_out = nullptr) {
  auto batches = data.val_batches(cfg.batch_size, cfg.seq_len, cfg.eval_windows);
  double total = 0;
  std::int64_t rows = 0, tokens = 0;
  for (const auto& b : batches) {
    for (int r = 0; r < b.batch; ++r) {
      auto fwd = model.forward(b.input_row(r), nullptr, traces_out != nullptr, nullptr);
      auto row_targets = b.target_row(r);
      std::vector<std::int64_t> targets(row_targets.begin(), row_targets.end());
      total += static_cast<double>(cross_entropy(fwd.logits, targets).item());
      ++rows;
      tokens += b.seq;
      if (traces_out)
        for (auto& tr : fwd.traces) traces_out->push_back(std::move(tr));
    }
  }
  if (tokens_out) *tokens_out = tokens;
  return total / static_cast<double>(rows);
}

// --- checkpoint glue ----------------------------------------------------------

template <typename T>
CheckpointData snapshot(Model<T>& model, AdamW<T>& opt, const RunConfig& run,
                        std::int64_t step) {
  CheckpointData ckpt;
  for (auto& p : model.params()) ckpt.tensors.emplace(p.name, to_record(p.tensor));
  std::size_t idx = 0;
  for (auto& p : model.params()) {
    ckpt.tensors.emplace("opt.m." + p.name, to_record(opt.first_moments()[idx]));
    ckpt.tensors.emplace("opt.v." + p.name, to_record(opt.second_moments()[idx]));
    ++idx;
  }
  ckpt.meta = nlohmann::json{{"config", nlohmann::json::parse(run_config_to_json_text(run))},
                             {"step", step},
                             {"opt_step", opt.step_count()}};
  return ckpt;
}

template <typename T>
void restore(Model<T>& model, AdamW<T>* opt, const CheckpointData& ckpt) {
  // Validate everything against a scratch copy first: a bad file must not
  // leave the model partially mutated.
  std::vector<Tensor<T>> loaded;
  std::vector<Tensor<T>> loaded_m, loaded_v;
  for (auto& p : model.params()) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end())
      throw IoError("checkpoint: missing tensor '" + p.name + "'");
    auto t = from_record<T>(p.name, it->second);
    if (t.shape() != p.tensor.shape())
      throw IoError("checkpoint: shape mismatch for '" + p.name + "': file " +
                    shape_str(t.shape()) + ", model " + shape_str(p.tensor.shape()));
    loaded.push_back(std::move(t));
    if (opt) {
      auto im = ckpt.tensors.find("opt.m." + p.name);
      auto iv = ckpt.tensors.find("opt.v." + p.name);
      if (im == ckpt.tensors.end() || iv == ckpt.tensors.end())
        throw IoError("checkpoint: missing optimizer state for '" + p.name + "'");
      loaded_m.push_back(from_record<T>("opt.m." + p.name, im->second));
      loaded_v.push_back(from_record<T>("opt.v." + p.name, iv->second));
    }
  }
  std::size_t idx = 0;
  for (auto& p : model.params()) {
    std::copy(loaded[idx].data().begin(), loaded[idx].data().end(), p.tensor.data().begin());
    if (opt) {
      std::copy(loaded_m[idx].data().begin(), loaded_m[idx].data().end(),
                opt->first_moments()[idx].data().begin());
      std::copy(loaded_v[idx].data().begin(), loaded_v[idx].data().end(),
                opt->second_moments()[idx].data().begin());
    }
    ++idx;
  }
  if (opt && ckpt.meta.contains("opt_step"))
    opt->set_step_count(ckpt.meta.at("opt_step").get<std::int64_t>());
}

// --- the loop -------------------------------------------------------------------

struct TrainResult {
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  std::int64_t steps_run = 0;
};

// Runs steps start_step+1 .. total_steps. Deterministic given (seed, configs,
// corpus): the batch at step s depends only on those, so a resumed run
// replays the exact step sequence of an uninterrupted one.
template <typename T>
TrainResult train(Model<T>& model, AdamW<T>& opt, const DataStream& data, const RunConfig& run,
                  const std::filesystem::path& out_dir, std::int64_t start_step = 0) {
  const TrainConfig& cfg = run.train;
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  MetricsWriter metrics((out_dir / "metrics.jsonl").string());
  const std::string final_path = (out_dir / "final.ckpt").string();

  TrainResult result;
  for (std::int64_t s = start_step + 1; s <= cfg.total_steps; ++s) {
    Batch batch = data.train_batch(cfg.seed, s, cfg.batch_size, cfg.seq_len);
    Tape<T> tape;
    model.watch_parameters(tape);
    auto loss = batch_loss(model, batch, &tape, cfg.trace_during_training);
    const double loss_value = static_cast<double>(loss.item());
    if (std::isnan(loss_value))
      throw NumericError("train: NaN loss at step " + std::to_string(s) +
                         "; last good checkpoint retained");
    model.zero_grads();
    tape.backward(loss);
    const auto clip = clip_global_norm(model.params(), cfg.clip_norm);
    const double rate = lr_at(cfg, s);
    opt.step(rate);

    result.final_train_loss = loss_value;
    result.steps_run = s;
    metrics.append({s, "train", loss_value, rate,
                    s * static_cast<std::int64_t>(cfg.batch_size) * cfg.seq_len, clip.norm});

    if (s % cfg.eval_interval == 0 || s == cfg.total_steps) {
      result.final_val_loss = evaluate(model, data, cfg);
      metrics.append({s, "val", result.final_val_loss, rate,
                      s * static_cast<std::int64_t>(cfg.batch_size) * cfg.seq_len, 0.0});
    }
    // Step-stamped periodic checkpoints stay on disk, so a later numeric
    // abort always leaves the last good one behind.
    if (cfg.checkpoint_interval > 0 && s % cfg.checkpoint_interval == 0)
      save_checkpoint((out_dir / ("step_" + std::to_string(s) + ".ckpt")).string(),
                      snapshot(model, opt, run, s));
  }
  save_checkpoint(final_path, snapshot(model, opt, run, cfg.total_steps));
  return result;
}

}  // namespace coe
