// SPDX-License-Identifier: Apache-2.0
//
// cgsd command-line driver. Every subcommand also takes `--config FILE`, a
// JSON object whose keys are flag names without the leading dashes; flags on
// the command line override values from the file.
//
// Exit codes: 0 success, 2 configuration error, 3 data/parse/version error or
// an invalid checkpoint, 4 non-finite loss, 1 anything else.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgsd/data.hpp"
#include "cgsd/errors.hpp"
#include "cgsd/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cgsd;

namespace {

// Deferred assignments: applied after the preset so that explicit flags win.
using Overrides = std::vector<std::function<void()>>;

template <typename T>
CLI::Option* flag(CLI::App* app, Overrides& ov, const std::string& name, T& target, const std::string& help) {
  auto held = std::make_shared<T>(target);
  CLI::Option* opt = app->add_option(name, *held, help)->capture_default_str();
  ov.push_back([opt, held, &target] {
    if (opt->count() > 0) target = *held;
  });
  return opt;
}

std::vector<double> parse_csv_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return out;
}

std::vector<int> parse_csv_ints(const std::string& text) {
  std::vector<int> out;
  for (double v : parse_csv_doubles(text)) {
    if (v != static_cast<int>(v)) throw ConfigError("not an integer step: " + std::to_string(v));
    out.push_back(static_cast<int>(v));
  }
  return out;
}

void require_distinct(const std::vector<std::string>& paths) {
  std::set<fs::path> seen;
  for (const auto& p : paths) {
    if (p.empty()) continue;
    if (!seen.insert(fs::weakly_canonical(p)).second) throw ConfigError("paths must be distinct: " + p);
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw DataError("cannot write " + path);
}

void print_line(const std::string& line) { std::cout << line << '\n'; }

// Finds `--config` in argv and returns the flag tokens it stands for.
std::vector<std::string> config_tokens(int argc, char** argv, CLI::App& app) {
  std::string file;
  std::string sub;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (sub.empty() && !arg.empty() && arg[0] != '-') sub = arg;
    if (arg == "--config" && i + 1 < argc) file = argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) file = arg.substr(9);
  }
  if (file.empty()) return {};
  CLI::App* target = sub.empty() ? nullptr : app.get_subcommand_no_throw(sub);
  if (target == nullptr) throw ConfigError("--config needs a subcommand");

  std::ifstream in(file);
  if (!in) throw DataError("config file not found: " + file);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config file " + file + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");

  std::vector<std::string> tokens;
  for (const auto& [key, value] : doc.items()) {
    if (key == "config") throw ConfigError("config files cannot nest");
    const CLI::Option* opt = target->get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError("unknown config key for " + sub + ": " + key);
    if (value.is_boolean()) {
      if (opt->get_expected_min() != 0) throw ConfigError("config key " + key + " takes a value");
      if (value.get<bool>()) tokens.push_back("--" + key);
    } else {
      tokens.push_back("--" + key);
      tokens.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return tokens;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-guided label diffusion classifier at desk scale"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::string config_file;
  auto add_sub = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "JSON file of flag values");
    return sub;
  };

  RunConfig cfg;
  SyntheticConfig syn;
  Overrides ov;
  bool desk = false;
  std::string data_dir, out_path, guidance_path, diffusion_path, report_path;
  std::string proportions_csv, steps_csv = "100,80,60,40,20,0";

  // gen-data
  CLI::App* gen = add_sub("gen-data", "Write a synthetic source/target benchmark");
  gen->add_option("--out", out_path, "Output directory")->required();
  flag(gen, ov, "--n", syn.n, "Items per domain");
  flag(gen, ov, "--d", syn.d_in, "Feature dimension");
  flag(gen, ov, "--k", syn.k, "Number of grades");
  gen->add_option("--proportions", proportions_csv, "Comma-separated class proportions");
  flag(gen, ov, "--delta", syn.separation, "Class separation");
  flag(gen, ov, "--sigma", syn.noise, "Within-class noise");
  flag(gen, ov, "--shift-angle", syn.shift_angle, "Target-domain rotation angle");
  flag(gen, ov, "--shift-bias", syn.shift_bias, "Target-domain offset");
  flag(gen, ov, "--seed", syn.seed, "Seed");
  gen->add_flag("--desk-preset", desk, "Desk-scale benchmark (n = 1200)");

  // train-guidance
  CLI::App* tg = add_sub("train-guidance", "Pretrain on the source domain, then adapt on the target");
  tg->add_option("--data", data_dir, "Benchmark directory")->required();
  tg->add_option("--out", out_path, "Guidance checkpoint to write")->required();
  flag(tg, ov, "--rank", cfg.shape.rank, "LoRA rank");
  flag(tg, ov, "--alpha", cfg.shape.alpha, "LoRA alpha");
  flag(tg, ov, "--epochs", cfg.stage1.epochs, "Stage-1 epochs");
  flag(tg, ov, "--batch", cfg.stage1.batch, "Stage-1 batch size");
  flag(tg, ov, "--lr-lora", cfg.stage1.lr_lora, "LoRA learning rate");
  flag(tg, ov, "--lr-prompt", cfg.stage1.lr_prompt, "Prompt learning rate");
  flag(tg, ov, "--warmup", cfg.stage1.warmup_epochs, "Warm-up epochs");
  flag(tg, ov, "--lambda-rank", cfg.stage1.lambda_rank, "Ranking loss weight");
  flag(tg, ov, "--margin", cfg.stage1.margin, "Ranking margin");
  flag(tg, ov, "--pretrain-epochs", cfg.pretrain.epochs, "Source-domain pretraining epochs");
  flag(tg, ov, "--seed", cfg.seed, "Seed");
  tg->add_flag("--desk-preset", desk, "Desk-scale budgets");

  // train-diffusion
  CLI::App* td = add_sub("train-diffusion", "Train the label denoiser against a frozen guidance model");
  td->add_option("--data", data_dir, "Benchmark directory")->required();
  td->add_option("--guidance", guidance_path, "Frozen guidance checkpoint")->required();
  td->add_option("--out", out_path, "Denoiser checkpoint to write")->required();
  flag(td, ov, "--timesteps", cfg.stage2.t_total, "Diffusion steps T");
  flag(td, ov, "--beta-start", cfg.stage2.beta_start, "First beta");
  flag(td, ov, "--beta-end", cfg.stage2.beta_end, "Last beta");
  flag(td, ov, "--epochs", cfg.stage2.epochs, "Epochs");
  flag(td, ov, "--batch", cfg.stage2.batch, "Batch size");
  flag(td, ov, "--lr", cfg.stage2.lr, "Initial learning rate");
  flag(td, ov, "--lr-min", cfg.stage2.lr_min, "Final learning rate");
  flag(td, ov, "--clip", cfg.stage2.clip, "Gradient norm clip");
  flag(td, ov, "--ema", cfg.stage2.ema_mu, "EMA decay");
  flag(td, ov, "--seed", cfg.seed, "Seed");
  td->add_flag("--desk-preset", desk, "Desk-scale budgets");

  // eval
  CLI::App* ev = add_sub("eval", "Score the target test split");
  ev->add_option("--data", data_dir, "Benchmark directory")->required();
  ev->add_option("--guidance", guidance_path, "Guidance checkpoint")->required();
  ev->add_option("--diffusion", diffusion_path, "Denoiser checkpoint; zero-shot when absent");
  ev->add_option("--report", report_path, "JSON report to write")->required();
  flag(ev, ov, "--samples", cfg.stage2.n_samples, "Chains per item");
  flag(ev, ov, "--stride", cfg.stage2.stride, "Timestep stride of the reverse chain");
  flag(ev, ov, "--threads", cfg.stage2.threads, "Worker threads");
  flag(ev, ov, "--seed", cfg.seed, "Seed");

  // ablate
  CLI::App* ab = add_sub("ablate", "Three-row ablation on one split");
  ab->add_option("--data", data_dir, "Benchmark directory")->required();
  ab->add_option("--out", out_path, "JSON report to write")->required();
  ab->add_flag("--desk-preset", desk, "Desk-scale budgets");
  flag(ab, ov, "--threads", cfg.stage2.threads, "Worker threads");
  flag(ab, ov, "--seed", cfg.seed, "Seed");

  // export-trajectory
  CLI::App* ex = add_sub("export-trajectory", "Projected label trajectories of the reverse chain");
  ex->add_option("--data", data_dir, "Benchmark directory")->required();
  ex->add_option("--guidance", guidance_path, "Guidance checkpoint")->required();
  ex->add_option("--diffusion", diffusion_path, "Denoiser checkpoint")->required();
  ex->add_option("--steps", steps_csv, "Comma-separated timesteps")->capture_default_str();
  ex->add_option("--out", out_path, "CSV to write")->required();
  flag(ex, ov, "--stride", cfg.stage2.stride, "Timestep stride of the reverse chain");
  flag(ex, ov, "--seed", cfg.seed, "Seed");

  try {
    // Config tokens go right after the subcommand name, ahead of every real
    // flag, so that the last occurrence (the command line) wins.
    const std::vector<std::string> from_file = config_tokens(argc, argv, app);
    std::vector<std::string> args;
    bool placed = false;
    for (int i = 1; i < argc; ++i) {
      args.emplace_back(argv[i]);
      if (!placed && argv[i][0] != '-') {
        args.insert(args.end(), from_file.begin(), from_file.end());
        placed = true;
      }
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  }

  try {
    if (desk) {
      cfg = apply_desk_preset(cfg);
      syn = apply_desk_preset(syn);
    }
    for (auto& apply : ov) apply();
    cfg.stage1.seed = cfg.seed;

    if (gen->parsed()) {
      if (!proportions_csv.empty()) syn.proportions = parse_csv_doubles(proportions_csv);
      write_benchmark(out_path, gen_synthetic(syn));
      return 0;
    }

    auto load = [&] {
      Benchmark bench = load_benchmark(data_dir, cfg.train_fraction, cfg.seed);
      cfg.shape.d_in = bench.domains.target.d_in;
      cfg.shape.k = bench.domains.target.k;
      return bench;
    };

    if (tg->parsed()) {
      require_distinct({data_dir, out_path});
      const Benchmark bench = load();
      validate(cfg);
      GuidanceModel base = pretrain_base(bench.domains.source, cfg, print_line);
      const GuidanceModel adapted = train_stage1(std::move(base), bench.target_train, cfg.stage1, print_line);
      save_guidance(out_path, adapted);
      return 0;
    }
    if (td->parsed()) {
      require_distinct({data_dir, guidance_path, out_path});
      const Benchmark bench = load();
      validate(cfg);
      const GuidanceModel guidance = load_guidance(guidance_path);
      const DenoiserCheckpoint ckpt = train_stage2(guidance, bench.target_train, cfg.stage2, cfg.seed, print_line);
      save_denoiser(out_path, ckpt);
      return 0;
    }
    if (ev->parsed()) {
      require_distinct({data_dir, guidance_path, diffusion_path, report_path});
      const Benchmark bench = load();
      const GuidanceModel guidance = load_guidance(guidance_path);
      cfg.shape = guidance.shape;
      std::optional<DenoiserCheckpoint> ckpt;
      if (!diffusion_path.empty()) {
        ckpt = load_denoiser(diffusion_path);
        cfg.stage2.t_total = ckpt->schedule.t_total;
        cfg.stage2.beta_start = ckpt->schedule.beta_start;
        cfg.stage2.beta_end = ckpt->schedule.beta_end;
      }
      validate(cfg);
      const EvalReport report =
          evaluate(guidance, ckpt ? &*ckpt : nullptr, bench.target_test, cfg, bench.split_hash);
      write_text(report_path, report_json(report));
      return 0;
    }
    if (ab->parsed()) {
      require_distinct({data_dir, out_path});
      const Benchmark bench = load();
      const AblationReport report = ablate(bench, cfg, print_line);
      write_text(out_path, ablation_json(report));
      for (const AblationRow& row : report.rows) {
        std::printf("%s: accuracy %.4f, macro-F1 %.4f\n", row.name.c_str(), row.report.metrics.accuracy,
                    row.report.metrics.macro_f1);
      }
      return 0;
    }
    if (ex->parsed()) {
      require_distinct({data_dir, guidance_path, diffusion_path, out_path});
      const Benchmark bench = load();
      const GuidanceModel guidance = load_guidance(guidance_path);
      const DenoiserCheckpoint ckpt = load_denoiser(diffusion_path);
      const std::vector<int> steps = parse_csv_ints(steps_csv);
      const Trajectory traj = export_trajectory(guidance, ckpt, bench.target_test, steps, cfg);
      write_trajectory(out_path, traj);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
