// coelab — train, evaluate, and analyze chained sparse-expert transformers.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 numeric abort.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "coe/analysis.hpp"
#include "coe/runner.hpp"
#include "json.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

coe::RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return coe::RunConfig{};
  return coe::load_run_config(path);
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool has_seed,
              std::uint64_t seed) {
  coe::RunConfig cfg = load_config_or_default(config_path);
  if (has_seed) cfg.train.seed = seed;
  auto result = coe::run_train(cfg, out_dir);
  nlohmann::json j{{"steps", result.steps_run},
                   {"final_train_loss", result.final_train_loss},
                   {"final_val_loss", result.final_val_loss},
                   {"out_dir", out_dir}};
  std::cout << j.dump() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out_dir) {
  auto report = coe::run_eval(ckpt, data, out_dir);
  if (report.single_step_warning)
    std::cerr << "warning: single-step layers produce no co-activation transitions; "
                 "heatmaps contain only summary lines\n";
  nlohmann::json j{{"val_loss", report.val_loss}, {"tokens", report.tokens}};
  std::cout << j.dump() << "\n";
  return kExitOk;
}

int cmd_count_combos(int n, int k, int c) {
  std::cout << coe::combination_ratio(n, k, c).to_json();
  return kExitOk;
}

int cmd_cost_model(const std::string& config_a, const std::string& config_b) {
  coe::RunConfig a = coe::load_run_config(config_a);
  coe::RunConfig b = coe::load_run_config(config_b);
  a.model.validate();
  b.model.validate();
  std::cout << coe::cost_compare(a.model, b.model).to_json();
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, int samples, std::uint64_t seed, bool corrupt) {
  coe::RunConfig cfg = load_config_or_default(config_path);
  auto report = coe::run_gradcheck(cfg, samples, seed, corrupt);
  nlohmann::json per_module = nlohmann::json::object();
  for (const auto& [module, err] : report.per_module) per_module[module] = err;
  nlohmann::json j{{"max_rel_err", report.max_rel_err},
                   {"threshold", report.threshold},
                   {"samples", report.samples_used},
                   {"skipped_selection_flips", report.skipped_selection_flips},
                   {"skipped_below_resolution", report.skipped_below_resolution},
                   {"per_module", per_module},
                   {"pass", report.pass}};
  std::cout << j.dump(2) << "\n";
  return report.pass ? kExitOk : kExitVerificationFailure;
}

std::string default_config_help() {
  return "Config file: JSON with sections model/train/data/analysis; every key is optional and "
         "unknown keys are rejected. Defaults:\n" +
         coe::run_config_to_json_text(coe::RunConfig{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coelab: chained sparse-expert transformer laboratory"};
  app.require_subcommand(1);
  app.footer(default_config_help());

  std::string config_path, out_dir = "out", ckpt_path, data_path, config_a, config_b;
  std::uint64_t seed = 0;
  bool corrupt = false;
  int samples = 200;
  int n = 64, k = 4, c = 2;

  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config_path, "Run config JSON (defaults used when omitted)");
  auto* seed_opt = train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out_dir, "Output directory")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--data", data_path, "Corpus file override ('copy' for the synthetic task)");
  eval->add_option("--out", out_dir, "Directory for co-activation CSVs")->capture_default_str();

  auto* combos = app.add_subcommand("count-combos", "Exact expert-combination counts");
  combos->add_option("--n", n, "Expert pool size")->capture_default_str();
  combos->add_option("--k", k, "Selections per routing pass")->capture_default_str();
  combos->add_option("--c", c, "Routing passes")->capture_default_str();

  auto* cost = app.add_subcommand("cost-model", "Analytic cost comparison of two configs");
  cost->add_option("--config-a", config_a, "First run config")->required();
  cost->add_option("--config-b", config_b, "Second run config")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  gradcheck->add_option("--config", config_path, "Run config JSON (defaults used when omitted)");
  gradcheck->add_option("--samples", samples, "Sampled parameter coordinates")
      ->capture_default_str();
  gradcheck->add_option("--seed", seed, "Probe seed")->capture_default_str();
  gradcheck->add_flag("--corrupt-backward", corrupt,
                      "Test hook: corrupt one analytic gradient (expect exit 1)");

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(config_path, out_dir, !seed_opt->empty(), seed);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_path, out_dir);
    if (combos->parsed()) return cmd_count_combos(n, k, c);
    if (cost->parsed()) return cmd_cost_model(config_a, config_b);
    if (gradcheck->parsed()) return cmd_gradcheck(config_path, samples, seed, corrupt);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const coe::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const coe::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
