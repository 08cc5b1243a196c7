#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "cgsd_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (work() / name).string(); }

// Runs the CLI with stdout sent to `log` (if given) and returns the exit code.
int cli(const std::string& args, const std::string& log = "") {
  std::string cmd = std::string(CGSD_CLI) + " " + args;
  cmd += log.empty() ? " >/dev/null" : " >" + at(log);
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_prefix(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  int n = 0;
  for (std::string line; std::getline(in, line);) n += line.rfind(prefix, 0) == 0 ? 1 : 0;
  return n;
}

const std::string& data_dir() {
  static const std::string dir = [] {
    const std::string d = at("bench");
    REQUIRE(cli("gen-data --out " + d + " --n 300 --d 8 --seed 3") == 0);
    return d;
  }();
  return dir;
}

// Guidance and denoiser checkpoints trained with tiny budgets.
const std::string& guidance() {
  static const std::string g = [] {
    const std::string p = at("guidance.json");
    REQUIRE(cli("train-guidance --data " + data_dir() + " --out " + p +
                " --epochs 3 --pretrain-epochs 2 --seed 3") == 0);
    return p;
  }();
  return g;
}

const std::string& denoiser() {
  static const std::string d = [] {
    const std::string p = at("denoiser.json");
    REQUIRE(cli("train-diffusion --data " + data_dir() + " --guidance " + guidance() + " --out " + p +
                " --timesteps 20 --epochs 2 --seed 3") == 0);
    return p;
  }();
  return d;
}

}  // namespace

TEST_CASE("gen-data writes both domains") {
  const std::string d = data_dir();
  CHECK(fs::exists(fs::path(d) / "source.csv"));
  CHECK(fs::exists(fs::path(d) / "target.csv"));
  const std::string again = at("bench_again");
  REQUIRE(cli("gen-data --out " + again + " --n 300 --d 8 --seed 3") == 0);
  CHECK(slurp(d + "/target.csv") == slurp(again + "/target.csv"));
}

TEST_CASE("configuration errors exit with 2") {
  CHECK(cli("gen-data --out " + at("neg") + " --n -5") == 2);
  CHECK(cli("gen-data --out " + at("x") + " --no-such-flag 1") == 2);
  CHECK(cli("") == 2);
  CHECK(cli("train-guidance --data " + data_dir() + " --out " + at("g.json") + " --rank 0") == 2);
  CHECK(cli("train-guidance --data " + data_dir() + " --out " + data_dir()) == 2);
  CHECK(cli("export-trajectory --data " + data_dir() + " --guidance " + guidance() + " --diffusion " + denoiser() +
            " --out " + at("t.csv") + " --steps ''") == 2);
  CHECK(cli("export-trajectory --data " + data_dir() + " --guidance " + guidance() + " --diffusion " + denoiser() +
            " --out " + at("t.csv") + " --steps 21,0") == 2);

  std::ofstream(at("unknown.json")) << R"({"epochz": 3})";
  CHECK(cli("train-guidance --config " + at("unknown.json") + " --data " + data_dir() + " --out " + at("g.json")) ==
        2);
}

TEST_CASE("data, parse and version errors exit with 3") {
  CHECK(cli("eval --data " + at("nowhere") + " --guidance " + guidance() + " --report " + at("r.json")) == 3);

  auto doc = nlohmann::json::parse(slurp(guidance()));
  doc["format"] = "cgsd-guidance-v9";
  std::ofstream(at("old.json")) << doc.dump();
  CHECK(cli("eval --data " + data_dir() + " --guidance " + at("old.json") + " --report " + at("r.json")) == 3);

  std::ofstream(at("broken.json")) << "{ not json";
  CHECK(cli("eval --data " + data_dir() + " --guidance " + at("broken.json") + " --report " + at("r.json")) == 3);

  auto thawed = nlohmann::json::parse(slurp(guidance()));
  thawed["frozen"] = false;
  std::ofstream(at("thawed.json")) << thawed.dump();
  CHECK(cli("train-diffusion --data " + data_dir() + " --guidance " + at("thawed.json") + " --out " +
            at("d2.json") + " --timesteps 10 --epochs 1") == 3);
}

TEST_CASE("a diverging run exits with 4") {
  CHECK(cli("train-guidance --data " + data_dir() + " --out " + at("boom.json") +
            " --epochs 2 --pretrain-epochs 1 --warmup 0 --lr-lora 1e200") == 4);
}

TEST_CASE("config file values apply and flags override them") {
  std::ofstream(at("cfg.json")) << R"({"epochs": 4, "pretrain-epochs": 1, "seed": 3})";
  REQUIRE(cli("train-guidance --config " + at("cfg.json") + " --data " + data_dir() + " --out " + at("c1.json"),
              "c1.log") == 0);
  CHECK(count_prefix(slurp(at("c1.log")), "stage1,") == 4);
  CHECK(count_prefix(slurp(at("c1.log")), "pretrain,") == 1);

  REQUIRE(cli("train-guidance --config " + at("cfg.json") + " --data " + data_dir() + " --out " + at("c2.json") +
                  " --epochs 2",
              "c2.log") == 0);
  CHECK(count_prefix(slurp(at("c2.log")), "stage1,") == 2);
}

TEST_CASE("training logs are machine-parseable") {
  REQUIRE(cli("train-diffusion --data " + data_dir() + " --guidance " + guidance() + " --out " + at("dlog.json") +
                  " --timesteps 10 --epochs 3",
              "d.log") == 0);
  std::istringstream in(slurp(at("d.log")));
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    CHECK(line.rfind("stage2," + std::to_string(lines) + ",", 0) == 0);
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
  }
  CHECK(lines == 3);
}

TEST_CASE("eval reports are byte-identical across runs and thread counts") {
  const std::string base = "eval --data " + data_dir() + " --guidance " + guidance() + " --diffusion " + denoiser();
  REQUIRE(cli(base + " --report " + at("r1.json")) == 0);
  REQUIRE(cli(base + " --report " + at("r2.json")) == 0);
  REQUIRE(cli(base + " --report " + at("r3.json") + " --threads 4") == 0);
  CHECK(slurp(at("r1.json")) == slurp(at("r2.json")));
  CHECK(slurp(at("r1.json")) == slurp(at("r3.json")));
  const auto doc = nlohmann::json::parse(slurp(at("r1.json")));
  CHECK(doc["mode"] == "diffusion");
  CHECK(doc.contains("macro_f1"));
  CHECK(doc["paper_reference"]["accuracy"] == 0.875);

  REQUIRE(cli("eval --data " + data_dir() + " --guidance " + guidance() + " --report " + at("z.json")) == 0);
  CHECK(nlohmann::json::parse(slurp(at("z.json")))["mode"] == "zero-shot");
}

TEST_CASE("export-trajectory writes points and silhouettes") {
  REQUIRE(cli("export-trajectory --data " + data_dir() + " --guidance " + guidance() + " --diffusion " + denoiser() +
              " --out " + at("traj.csv") + " --steps 20,10,0") == 0);
  const std::string csv = slurp(at("traj.csv"));
  CHECK(csv.rfind("t,item_id,true_label,px,py\n", 0) == 0);
  const int rows = count_prefix(csv, "20,") + count_prefix(csv, "10,") + count_prefix(csv, "0,");
  CHECK(rows % 3 == 0);
  CHECK(rows > 0);
  const std::string sil = slurp(at("traj.csv.silhouette.csv"));
  CHECK(sil.rfind("t,silhouette\n20,", 0) == 0);
}
