#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunOutput {
  int exit_code = -1;
  std::string output;  // stdout + stderr interleaved
};

std::string cli_path() {
  const char* bin = std::getenv("COELAB_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "COELAB_BIN must point at the coelab binary");
  return bin;
}

RunOutput run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunOutput out;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.output.append(buf.data(), n);
  const int status = pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("coelab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  auto path = dir / name;
  std::ofstream(path) << j.dump(2);
  return path;
}

json tiny_train_config(int steps = 8) {
  return json{
      {"model",
       {{"layers", 2},
        {"hidden", 32},
        {"heads", 4},
        {"vocab", 256},
        {"max_seq", 64},
        {"coe",
         {{"routed_experts", 4},
          {"shared_experts", 1},
          {"total_selections", 2},
          {"steps", 2},
          {"ffn_hidden", 32}}}}},
      {"train",
       {{"total_steps", steps},
        {"batch_size", 2},
        {"seq_len", 16},
        {"eval_interval", 4},
        {"eval_windows", 2},
        {"seed", 5}}},
      {"data", {{"task", "copy"}}},
  };
}

std::string last_val_loss(const fs::path& metrics) {
  std::ifstream in(metrics);
  REQUIRE(in);
  std::string line, last;
  while (std::getline(in, line))
    if (line.find("\"val\"") != std::string::npos) last = line;
  REQUIRE(!last.empty());
  return json::parse(last).at("loss").dump();  // exact textual form
}

}  // namespace

TEST_CASE("missing config file exits 2 and names the path") {
  auto r = run_cli("train --config /nonexistent/cfg.json --out /tmp/coelab_cli_unused");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("/nonexistent/cfg.json") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected") {
  auto dir = fresh_dir("badkey");
  auto cfg = tiny_train_config();
  cfg["modl"] = json::object();
  auto path = write_config(dir, "cfg.json", cfg);
  auto r = run_cli("train --config " + path.string() + " --out " + (dir / "out").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("modl") != std::string::npos);
}

TEST_CASE("train writes metrics, checkpoint, and a resolved config snapshot") {
  auto dir = fresh_dir("train");
  auto path = write_config(dir, "cfg.json", tiny_train_config());
  auto out = dir / "out";
  auto r = run_cli("train --config " + path.string() + " --out " + out.string());
  CAPTURE(r.output);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(out / "metrics.jsonl"));
  CHECK(fs::exists(out / "final.ckpt"));
  CHECK(fs::exists(out / "config.resolved.json"));

  SUBCASE("--seed overrides the config seed in the snapshot") {
    auto out2 = dir / "out_seeded";
    auto r2 = run_cli("train --config " + path.string() + " --seed 777 --out " + out2.string());
    CHECK(r2.exit_code == 0);
    std::ifstream snap(out2 / "config.resolved.json");
    json resolved = json::parse(snap);
    CHECK(resolved.at("train").at("seed").get<std::uint64_t>() == 777);
  }

  SUBCASE("the resolved snapshot re-executes to identical metrics") {
    auto out2 = dir / "out_replay";
    auto r2 = run_cli("train --config " + (out / "config.resolved.json").string() + " --out " +
                      out2.string());
    CHECK(r2.exit_code == 0);
    std::ifstream a(out / "metrics.jsonl"), b(out2 / "metrics.jsonl");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }

  SUBCASE("eval reproduces the final logged validation loss exactly") {
    auto eval_out = dir / "eval";
    auto r2 = run_cli("eval --ckpt " + (out / "final.ckpt").string() + " --out " + eval_out.string());
    CAPTURE(r2.output);
    CHECK(r2.exit_code == 0);
    const auto line = r2.output.substr(r2.output.find('{'));
    json e = json::parse(line);
    CHECK(e.at("val_loss").dump() == last_val_loss(out / "metrics.jsonl"));
    CHECK(e.at("tokens").get<std::int64_t>() > 0);
    // C=2 run has real co-activation output.
    CHECK(fs::exists(eval_out / "coactivation_layer0.csv"));
    CHECK(fs::exists(eval_out / "coactivation_layer1.csv"));
  }
}

TEST_CASE("corrupt checkpoints exit 2") {
  auto dir = fresh_dir("corrupt");
  auto bad = dir / "bad.ckpt";
  std::ofstream(bad, std::ios::binary) << "not a checkpoint";
  auto r = run_cli("eval --ckpt " + bad.string() + " --out " + (dir / "out").string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("single-pass models emit empty co-activation files with a warning") {
  auto dir = fresh_dir("single_pass");
  auto cfg = tiny_train_config(4);
  cfg["model"]["coe"]["steps"] = 1;
  auto path = write_config(dir, "cfg.json", cfg);
  auto out = dir / "out";
  REQUIRE(run_cli("train --config " + path.string() + " --out " + out.string()).exit_code == 0);
  auto eval_out = dir / "eval";
  auto r = run_cli("eval --ckpt " + (out / "final.ckpt").string() + " --out " + eval_out.string());
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("warning") != std::string::npos);
  std::ifstream csv(eval_out / "coactivation_layer0.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 2);  // header + summary only
}

TEST_CASE("count-combos prints exact integers") {
  auto r = run_cli("count-combos --n 64 --k 4 --c 2");
  CHECK(r.exit_code == 0);
  json j = json::parse(r.output);
  CHECK(j.at("combos_coe").get<std::string>() == "403702661376");
  CHECK(j.at("combos_moe").get<std::string>() == "4426165368");
  CHECK(j.at("ratio_decimal").get<double>() == doctest::Approx(91.2081).epsilon(1e-4));

  auto unit = run_cli("count-combos --n 64 --k 8 --c 1");
  CHECK(unit.exit_code == 0);
  CHECK(json::parse(unit.output).at("ratio_decimal").get<double>() == doctest::Approx(1.0));

  auto bad = run_cli("count-combos --n 64 --k 40 --c 2");
  CHECK(bad.exit_code == 2);
}

TEST_CASE("cost-model compares two configs") {
  auto dir = fresh_dir("cost");
  auto a = tiny_train_config();
  auto b = tiny_train_config();
  b["model"]["coe"]["total_selections"] = 4;
  b["model"]["coe"]["steps"] = 1;
  auto pa = write_config(dir, "a.json", a);
  auto pb = write_config(dir, "b.json", b);
  auto r = run_cli("cost-model --config-a " + pa.string() + " --config-b " + pb.string());
  CAPTURE(r.output);
  CHECK(r.exit_code == 0);
  json j = json::parse(r.output);
  CHECK(j.at("invocations_per_token_per_layer").at("a").get<int>() == 2);
  CHECK(j.at("invocations_per_token_per_layer").at("b").get<int>() == 4);
  CHECK(j.at("params_a").at("total").get<std::int64_t>() > 0);
}

TEST_CASE("gradcheck command verifies the tiny model") {
  auto dir = fresh_dir("gradcheck");
  auto cfg = tiny_train_config();
  cfg["model"]["vocab"] = 17;
  auto path = write_config(dir, "cfg.json", cfg);

  auto r = run_cli("gradcheck --config " + path.string() + " --samples 40");
  CAPTURE(r.output);
  CHECK(r.exit_code == 0);
  json j = json::parse(r.output);
  CHECK(j.at("pass").get<bool>());
  CHECK(j.at("max_rel_err").get<double>() < 1e-4);
  CHECK(j.at("per_module").size() > 1);

  auto zero = run_cli("gradcheck --config " + path.string() + " --samples 0");
  CHECK(zero.exit_code == 2);

  auto corrupted = run_cli("gradcheck --config " + path.string() +
                           " --samples 40 --corrupt-backward");
  CHECK(corrupted.exit_code == 1);
}
