// metaval: run validation-set selection experiments and the oracle batteries.
//
//   metaval run --config exp.cfg [--seed S] [--strategy NAME] [--out DIR]
//   metaval sweep --config exp.cfg --seeds 0..4 [--strategy NAME] [--out DIR]
//   metaval oracle-check

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "metaval/errors.hpp"
#include "metaval/harness.hpp"
#include "metaval/oracles.hpp"

namespace fs = std::filesystem;
using namespace metaval;

namespace {

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string strategy;
  std::string out = "metaval_out";
  std::string seeds;
};

ExperimentConfig prepare(const RunOptions& o) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.strategy.empty()) cfg.strategy = parse_strategy(o.strategy);
  cfg.validate();
  return cfg;
}

void print_final(const ExperimentConfig& cfg, const ExperimentResult& r) {
  const auto& m = r.metrics.back();
  std::printf("seed=%llu strategy=%s iter=%lld test_acc=%.4f val_clean=%.4f dc_precision=%.4f dc_recall=%.4f\n",
              static_cast<unsigned long long>(cfg.seed), to_string(cfg.strategy).c_str(),
              static_cast<long long>(m.iter), m.test_acc, m.val_clean, m.dc_precision, m.dc_recall);
}

int cmd_run(const RunOptions& o) {
  const auto cfg = prepare(o);
  const auto result = run_experiment(cfg);
  emit_metrics(result.metrics, o.out);
  print_final(cfg, result);
  return 0;
}

std::pair<std::uint64_t, std::uint64_t> parse_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw ConfigError("--seeds expects a..b");
  const auto a = std::stoull(s.substr(0, dots));
  const auto b = std::stoull(s.substr(dots + 2));
  if (b < a) throw ConfigError("--seeds range is empty");
  return {a, b};
}

int cmd_sweep(const RunOptions& o) {
  const auto [first, last] = parse_range(o.seeds);
  std::vector<MetricsRecord> finals;
  for (auto s = first; s <= last; ++s) {
    RunOptions one = o;
    one.seed = s;
    const auto cfg = prepare(one);
    const auto result = run_experiment(cfg);
    emit_metrics(result.metrics, fs::path(o.out) / ("seed_" + std::to_string(s)));
    print_final(cfg, result);
    finals.push_back(result.metrics.back());
  }
  std::ofstream summary(fs::path(o.out) / "sweep_final.csv");
  if (!summary) throw IoError("cannot write sweep summary under " + o.out);
  summary << metrics_to_csv(finals);
  return 0;
}

int cmd_oracle_check() {
  bool ok = true;
  for (const auto& r : {oracle::backward_battery(), oracle::meta_gradient_battery(),
                        oracle::greedy_battery(), oracle::brute_force_battery()}) {
    std::printf("[%s] %s: %s (%.2fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(),
                r.seconds);
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-label meta-learning with utility-maximising validation sets"};
  app.require_subcommand(1);
  RunOptions opts;

  auto* run = app.add_subcommand("run", "Run one experiment and write metrics.jsonl / metrics.csv");
  run->add_option("--config", opts.config, "Experiment config (key = value)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", opts.seed, "Override the config seed");
  run->add_option("--strategy", opts.strategy,
                  "max_utility | random | most_confident | weight_only | info_only");
  run->add_option("--out", opts.out, "Output directory");

  auto* sweep = app.add_subcommand("sweep", "Run one experiment per seed in a..b");
  sweep->add_option("--config", opts.config, "Experiment config (key = value)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--seeds", opts.seeds, "Seed range a..b (inclusive)")->required();
  sweep->add_option("--strategy", opts.strategy, "Selection strategy override");
  sweep->add_option("--out", opts.out, "Output directory");

  auto* oracle = app.add_subcommand("oracle-check", "Run the finite-difference and greedy oracle batteries");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (run->parsed()) return cmd_run(opts);
    if (sweep->parsed()) return cmd_sweep(opts);
    if (oracle->parsed()) return cmd_oracle_check();
  } catch (const std::exception& e) {
    std::cerr << "metaval: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
