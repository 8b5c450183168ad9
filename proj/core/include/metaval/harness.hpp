#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "metaval/clean_detect.hpp"
#include "metaval/data.hpp"
#include "metaval/meta_engine.hpp"
#include "metaval/nn.hpp"
#include "metaval/utility_select.hpp"

namespace metaval {

enum class SelectionStrategy { kMaxUtility, kRandom, kMostConfident, kWeightOnly, kInfoOnly };

std::string to_string(SelectionStrategy s);
SelectionStrategy parse_strategy(const std::string& name);

struct ExperimentConfig {
  // Data. An empty train_csv means the synthetic generator.
  std::string train_csv;
  std::string test_csv;
  SyntheticKind generator = SyntheticKind::kGaussianBlobs;
  int num_classes = 4;
  std::size_t n_max = 1124;  // largest class before long-tail subsampling
  std::size_t dim = 2;
  double spread = 0.35;
  std::size_t test_per_class = 250;
  NoiseSpec noise{NoiseKind::kSymmetric, 0.4, {}, {}};
  ImbalanceSpec imbalance{10.0};

  std::vector<std::size_t> hidden = {32, 32};

  LrSchedule schedule{0.1, 0.001, 200, 1.0};
  std::int64_t iterations = 1000;        // T
  std::int64_t robust_start = -1;        // T~; < 0 -> T/4
  std::int64_t update_interval = 0;      // T^(u); 0 -> one epoch of iterations
  double robust_lr_threshold = -1.0;     // eta~; < 0 -> (eta_max + eta_min)/2

  double kappa = 0.9;
  std::size_t candidates_per_class = 200;  // N
  std::size_t val_per_class = 10;          // M
  std::size_t lower_per_class = 50;        // K
  std::size_t window = 5;                  // E
  std::size_t batch_size = 100;            // B

  MetaConfig meta;
  WarmupConfig warmup{50, 5, 0.1, 32, 0.1, 0};

  SelectionStrategy strategy = SelectionStrategy::kMaxUtility;
  CleanMetric clean_metric = CleanMetric::kDot;
  TrainingSetRule training_rule = TrainingSetRule::kAllButValidation;
  GradientTarget gradient_target = GradientTarget::kObserved;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  [[nodiscard]] std::vector<std::size_t> layer_dims(std::size_t input_dim) const;
};

// Flat "key = value" text, '#' starts a comment. Unknown keys are errors.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& cfg);

struct MetricsRecord {
  std::int64_t iter = 0;
  double test_acc = 0.0;
  double val_clean = 0.0;
  double dc_precision = 0.0;
  double dc_recall = 0.0;
  double lr = 0.0;
  double omega_clean_mean = 0.0;
  double omega_noisy_mean = 0.0;
  double info_obj = 0.0;
  double clean_obj = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

struct ExperimentData {
  Dataset train;
  Dataset test;
};

ExperimentData build_data(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<MetricsRecord> metrics;
  MlpModel model;
  SelectionResult selection;
  std::vector<std::size_t> clean_set;
  std::vector<std::string> warnings;
};

// Argmax (lowest index on ties) against clean labels.
double evaluate(const MlpModel& model, const Dataset& test);

// Runs the full pipeline on prepared data. The training path reads only features and observed
// labels; clean labels and the open-set mask feed the metrics alone.
ExperimentResult run_pipeline(const ExperimentConfig& cfg, const ExperimentData& data);
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Validation-set choice for every strategy. `pool` is the label-consistent candidate subset,
// `clean_set` the pseudo-clean set.
SelectionResult select_validation(const ExperimentConfig& cfg, const MlpModel& model,
                                  const Dataset& ds, const FeatureTable& feats,
                                  std::span<const std::size_t> pool,
                                  std::span<const std::size_t> clean_set, std::uint64_t seed);

// Top-M per class by max softmax probability, ties to the lowest row.
std::vector<std::size_t> most_confident(std::span<const std::size_t> rows,
                                        const std::vector<Vec>& probs, std::span<const int> labels,
                                        int num_classes, std::size_t per_class);

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {"iter",         "test_acc",         "val_clean",
                                                "dc_precision", "dc_recall",        "lr",
                                                "omega_clean_mean", "omega_noisy_mean", "info_obj",
                                                "clean_obj"};
  return cols;
}

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& stream);
std::string metrics_to_csv(const std::vector<MetricsRecord>& stream);
std::vector<MetricsRecord> parse_metrics_jsonl(const std::string& text);
// Writes <dir>/metrics.jsonl and <dir>/metrics.csv.
void emit_metrics(const std::vector<MetricsRecord>& stream, const std::filesystem::path& dir);

}  // namespace metaval
