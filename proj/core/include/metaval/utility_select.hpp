#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metaval/data.hpp"
#include "metaval/linalg.hpp"
#include "metaval/nn.hpp"

namespace metaval {

// Last-layer features for every dataset row: z = penultimate activation, g = probs - target.
struct FeatureTable {
  Matrix z;
  Matrix g;
  std::vector<int> cls;
  int num_classes = 0;

  [[nodiscard]] std::size_t size() const noexcept { return cls.size(); }
};

enum class GradientTarget { kObserved, kRobust };

FeatureTable compute_features(const MlpModel& model, const Dataset& ds);
// Uses robust_labels[i] as the gradient target instead of the observed one-hot.
FeatureTable compute_features(const MlpModel& model, const Dataset& ds,
                              std::span<const Vec> robust_labels);

// (z_j . z_i) * (g_j . g_i)
double iota(std::span<const double> z_i, std::span<const double> g_i, std::span<const double> z_j,
            std::span<const double> g_j);
double iota(const FeatureTable& f, std::size_t i, std::size_t j);

enum class CleanMetric { kDot, kCosine };

// Sum over pool \ candidate of the best same-class iota against the candidate set.
// Samples whose class has no candidate contribute 0.
double info_objective(std::span<const std::size_t> candidate, std::span<const std::size_t> pool,
                      const FeatureTable& f);
// Sum over same-class (j in subset, i in pool \ subset) of z_j . z_i.
double clean_objective(std::span<const std::size_t> subset, std::span<const std::size_t> pool,
                       const FeatureTable& f, CleanMetric metric = CleanMetric::kDot);
// Sum over same-class (j in subset, i in pool \ subset) of iota(i, j).
double weight_sum_objective(std::span<const std::size_t> subset, std::span<const std::size_t> pool,
                            const FeatureTable& f);

struct GreedyResult {
  std::vector<std::size_t> sequence;  // selection order: classes ascending, picks in order
  std::vector<int> short_classes;     // classes that could not supply the full quota
  double objective = 0.0;
};

GreedyResult greedy_lower(std::span<const std::size_t> pool, const FeatureTable& f, std::size_t K);
GreedyResult greedy_upper(std::span<const std::size_t> lower_set, std::span<const std::size_t> pool,
                          const FeatureTable& f, std::size_t M, std::size_t K,
                          CleanMetric metric = CleanMetric::kDot);
// Greedy on the summed weight (no inner max). Used by the weight-only ablation.
GreedyResult greedy_weight_sum(std::span<const std::size_t> pool, const FeatureTable& f,
                               std::size_t K);

enum class TrainingSetRule { kAllButValidation, kCleanButValidation };

enum class LowerObjective { kInfo, kWeightSum };

struct SelectionResult {
  std::vector<std::size_t> lower_set;       // sorted
  std::vector<std::size_t> validation_set;  // sorted
  std::vector<std::size_t> training_set;    // sorted
  std::vector<std::size_t> lower_sequence;
  std::vector<std::size_t> upper_sequence;
  double lower_objective = 0.0;
  double upper_objective = 0.0;
  std::vector<std::string> warnings;
};

struct SelectionParams {
  std::size_t M = 10;
  std::size_t K = 50;
  CleanMetric clean_metric = CleanMetric::kDot;
  TrainingSetRule training_rule = TrainingSetRule::kAllButValidation;
  LowerObjective lower = LowerObjective::kInfo;
};

// Greedy lower level over `pool` (Info, or summed weight), then upper level over the result (Clean) scored
// against `clean_reference` (D^(c)); an empty reference means `pool`.
SelectionResult max_utility(std::span<const std::size_t> pool,
                            std::span<const std::size_t> clean_reference, const FeatureTable& f,
                            const SelectionParams& params, std::size_t dataset_size);

// Fills training_set from validation_set.
void fill_training_set(SelectionResult& r, std::size_t dataset_size,
                       std::span<const std::size_t> clean_reference, TrainingSetRule rule);

// Returns one message per violated structural invariant; empty when the selection is sound.
std::vector<std::string> check_selection(const SelectionResult& r, std::span<const std::size_t> pool,
                                         std::span<const std::size_t> clean_set,
                                         const FeatureTable& f, std::size_t M, std::size_t K,
                                         std::size_t dataset_size);

enum class OracleObjective { kInfo, kClean };

struct OracleResult {
  std::vector<std::size_t> subset;  // sorted
  double value = 0.0;
  std::size_t evaluated = 0;
};

inline constexpr std::size_t kBruteForceLimit = 50000;

// Exhaustive search over subsets with min(per_class, class size) members of every class in pool.
// Throws ConfigError when more than kBruteForceLimit subsets would be enumerated.
OracleResult brute_force_oracle(std::span<const std::size_t> pool, const FeatureTable& f,
                                OracleObjective objective, std::size_t per_class);

}  // namespace metaval
