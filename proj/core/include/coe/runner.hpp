#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "coe/analysis.hpp"
#include "coe/training.hpp"

namespace coe {

// --- train ---------------------------------------------------------------------

template <typename T>
TrainResult run_train_typed(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  Model<T> model(cfg.model, cfg.train.seed);
  AdamW<T> opt(model.params(), cfg.train);
  DataStream data = DataStream::from_config(cfg.data, cfg.train.val_fraction);
  return train(model, opt, data, cfg, out_dir);
}

inline TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::ofstream snap(out_dir / "config.resolved.json", std::ios::binary | std::ios::trunc);
  if (!snap) throw IoError("train: cannot write config snapshot in '" + out_dir.string() + "'");
  snap << run_config_to_json_text(cfg);
  snap.flush();
  if (cfg.train.precision == "f32") return run_train_typed<float>(cfg, out_dir);
  return run_train_typed<double>(cfg, out_dir);
}

// --- eval ----------------------------------------------------------------------

struct EvalReport {
  double val_loss = 0.0;
  std::int64_t tokens = 0;
  std::vector<std::string> heatmap_files;
  bool single_step_warning = false;
};

template <typename T>
EvalReport run_eval_typed(const RunConfig& cfg, const CheckpointData& ckpt,
                          const std::filesystem::path& out_dir) {
  Model<T> model(cfg.model, cfg.train.seed);
  restore<T>(model, nullptr, ckpt);
  DataStream data = DataStream::from_config(cfg.data, cfg.train.val_fraction);

  EvalReport report;
  std::vector<RoutingTrace> traces;
  report.val_loss = evaluate(model, data, cfg.train, &traces, &report.tokens);

  const int n_experts = cfg.model.coe.routed_experts;
  std::vector<CoActivationMatrix> per_layer;
  for (int l = 0; l < cfg.model.layers; ++l) per_layer.emplace_back(l, n_experts);
  for (const auto& tr : traces) {
    auto m = accumulate_coactivation(tr, n_experts);
    per_layer[static_cast<std::size_t>(tr.layer)].merge(m);
    if (m.single_step) per_layer[static_cast<std::size_t>(tr.layer)].single_step = true;
  }
  std::filesystem::create_directories(out_dir);
  for (const auto& m : per_layer) {
    const auto path = out_dir / ("coactivation_layer" + std::to_string(m.layer) + ".csv");
    export_heatmap(m, path.string());
    report.heatmap_files.push_back(path.string());
    report.single_step_warning = report.single_step_warning || m.single_step;
  }
  return report;
}

// Loads a checkpoint, rebuilds the model at the recorded precision, and
// evaluates on the held-out split. `data_path`, when nonempty, points the
// bytes task at a different corpus file.
inline EvalReport run_eval(const std::string& ckpt_path, const std::string& data_path,
                           const std::filesystem::path& out_dir) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.meta.contains("config"))
    throw IoError("checkpoint: missing embedded config in '" + ckpt_path + "'");
  RunConfig cfg = run_config_from_json_text(ckpt.meta.at("config").dump());
  if (!data_path.empty()) {
    if (data_path == "copy")
      cfg.data.task = "copy";
    else {
      cfg.data.task = "bytes";
      cfg.data.path = data_path;
    }
  }
  cfg.validate();
  if (cfg.train.precision == "f32") return run_eval_typed<float>(cfg, ckpt, out_dir);
  return run_eval_typed<double>(cfg, ckpt, out_dir);
}

// --- gradient checking -----------------------------------------------------------

struct GradcheckReport {
  double max_rel_err = 0.0;
  int samples_used = 0;
  int skipped_selection_flips = 0;
  int skipped_below_resolution = 0;
  std::map<std::string, double> per_module;  // module -> max relative error
  bool pass = false;
  double threshold = 1e-4;
};

// Buckets "layer.3.expert.2.up" -> "expert", "head" -> "head", etc.
inline std::string module_of(const std::string& param_name) {
  if (param_name.rfind("layer.", 0) != 0) return param_name == "embed" ? "embed" : param_name;
  const auto rest = param_name.substr(param_name.find('.', 6) + 1);
  const auto head = rest.substr(0, rest.find('.'));
  if (head == "attn") return "attention";
  if (head == "expert") return "expert";
  if (head == "shared") return "shared_expert";
  if (head == "router") return "router";
  return "norm";
}

// Central-difference check of the full training loss wrt randomly sampled
// parameter coordinates. Two kinds of coordinate are skipped and resampled:
// ones whose perturbation flips an expert selection (the loss is not
// differentiable there), and ones where both derivative estimates sit below
// the rounding noise floor of the difference quotient, |f|·ε/(2h), scaled by
// the pass threshold — central differences cannot certify those at this h. A
// wrong gradient still fails: it would leave one side large.
template <typename T>
GradcheckReport run_gradcheck_typed(const RunConfig& cfg, int samples, std::uint64_t seed,
                                    bool corrupt_backward) {
  Model<T> model(cfg.model, cfg.train.seed);

  // Small fixed probe batch.
  const int rows = 2, seq = std::min(6, cfg.model.max_seq);
  Batch batch;
  batch.batch = rows;
  batch.seq = seq;
  RngStream rng(seed, "gradcheck/tokens");
  for (int i = 0; i < rows * seq; ++i)
    batch.inputs.push_back(static_cast<std::int32_t>(rng.next_below(cfg.model.vocab)));
  for (int i = 0; i < rows * seq; ++i)
    batch.targets.push_back(static_cast<std::int32_t>(rng.next_below(cfg.model.vocab)));

  auto loss_and_traces = [&](std::vector<RoutingTrace>* traces) {
    return static_cast<double>(batch_loss(model, batch, nullptr, traces != nullptr, traces).item());
  };

  // One backward pass gives every analytic derivative.
  {
    Tape<T> tape;
    model.watch_parameters(tape);
    auto loss = batch_loss(model, batch, &tape, false);
    model.zero_grads();
    tape.backward(loss);
  }

  std::vector<Parameter<T>*> params;
  std::int64_t total_elems = 0;
  for (auto& p : model.params()) {
    params.push_back(&p);
    total_elems += p.tensor.size();
  }

  GradcheckReport report;
  const T h = static_cast<T>(1e-5);
  RngStream pick(seed, "gradcheck/coords");
  int attempts = 0;
  const int max_attempts = samples * 20;
  while (report.samples_used < samples && attempts < max_attempts) {
    ++attempts;
    auto flat = static_cast<std::int64_t>(pick.next_below(static_cast<std::uint64_t>(total_elems)));
    Parameter<T>* param = nullptr;
    for (auto* p : params) {
      if (flat < p->tensor.size()) {
        param = p;
        break;
      }
      flat -= p->tensor.size();
    }
    const T saved = param->tensor.at(flat);
    std::vector<RoutingTrace> plus_traces, minus_traces;
    param->tensor.at(flat) = saved + h;
    const double fp = loss_and_traces(&plus_traces);
    param->tensor.at(flat) = saved - h;
    const double fm = loss_and_traces(&minus_traces);
    param->tensor.at(flat) = saved;

    bool flipped = false;
    for (std::size_t i = 0; i < plus_traces.size() && !flipped; ++i)
      flipped = plus_traces[i].experts != minus_traces[i].experts;
    if (flipped) {
      ++report.skipped_selection_flips;
      continue;
    }

    const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
    double analytic = static_cast<double>(param->tensor.grad()[static_cast<std::size_t>(flat)]);
    if (corrupt_backward && report.samples_used == 0) analytic = analytic * 3.0 + 1.0;  // test hook

    const double fd_noise = std::max(std::abs(fp), std::abs(fm)) *
                            std::numeric_limits<double>::epsilon() / (2.0 * static_cast<double>(h));
    const double resolution = 10.0 * fd_noise / report.threshold;
    if (std::max(std::abs(analytic), std::abs(numeric)) < resolution) {
      ++report.skipped_below_resolution;
      continue;
    }
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    auto& slot = report.per_module[module_of(param->name)];
    slot = std::max(slot, rel);
    ++report.samples_used;
  }
  report.pass = report.samples_used > 0 && report.max_rel_err < report.threshold;
  return report;
}

inline GradcheckReport run_gradcheck(const RunConfig& cfg, int samples, std::uint64_t seed = 1,
                                     bool corrupt_backward = false) {
  if (samples < 1) throw UsageError("gradcheck: samples must be >= 1");
  cfg.model.validate();
  // Gradient checks need 64-bit headroom regardless of the training precision.
  return run_gradcheck_typed<double>(cfg, samples, seed, corrupt_backward);
}

}  // namespace coe
