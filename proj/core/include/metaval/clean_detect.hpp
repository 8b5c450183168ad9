#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "metaval/data.hpp"
#include "metaval/nn.hpp"

namespace metaval {

struct WarmupConfig {
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  double eta = 0.1;
  std::size_t batch_size = 32;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

// Plain CE training on observed labels. A `holdout_fraction` slice is held out only to
// decide when to stop; the returned model is the checkpoint with the lowest held-out CE.
MlpModel warmup_train(const MlpModel& init, const Dataset& ds, const WarmupConfig& cfg);

std::vector<double> per_sample_losses(const MlpModel& model, const Dataset& ds);

struct PartitionResult {
  std::vector<std::size_t> clean_idx;
  std::vector<std::size_t> noisy_idx;
  std::vector<double> clean_posteriors;
  bool used_fallback = false;
};

struct GaussianMixture1d {
  double weight[2];
  double mean[2];
  double var[2];
  double log_likelihood;
  int iterations;
};

// Two-component EM on scalar data. Component 0 is the lower-mean one on return.
GaussianMixture1d fit_gmm_1d(std::span<const double> values, int max_iter = 100, double tol = 1e-6);

// Small-loss split: clean = posterior of the low-loss component > 0.5. When the fitted means
// differ by < 1e-3 the ceil(n/2) smallest losses are called clean (ties by index).
PartitionResult partition_small_loss(std::span<const double> losses);

struct SampleState {
  double omega = 0.0;
  double lambda = 1.0;
  Vec robust_label;
  std::deque<Vec> pred_window;
  double loss = 0.0;

  void push_prediction(const Vec& p, std::size_t window);
};

// ytilde <- kappa * ytilde + (1 - kappa) * mean(window). Returns false (state untouched) while
// the window holds fewer than `window` predictions.
bool update_moving_avg(SampleState& state, double kappa, std::size_t window);

struct CandidateSubset {
  std::vector<std::size_t> indices;  // ascending
  std::vector<int> empty_classes;
};

int argmax_lowest(std::span<const double> v);

// Label-consistent subset of clean_idx, at most `per_class` per class, uniformly sampled.
// robust_labels is indexed by dataset row.
CandidateSubset build_candidate_subset(std::span<const std::size_t> clean_idx,
                                       std::span<const int> observed_labels,
                                       std::span<const Vec> robust_labels, int num_classes,
                                       std::size_t per_class, std::uint64_t seed);

}  // namespace metaval
