#pragma once

// Independent checkers: finite differences for every analytic gradient and a from-scratch
// greedy / exhaustive search for the selection objectives. Shared by the CLI `oracle-check`
// command and the acceptance suite; none of this code calls the incremental selectors.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaval/data.hpp"
#include "metaval/nn.hpp"
#include "metaval/utility_select.hpp"

namespace metaval::oracle {

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

struct BackwardCheck {
  std::size_t params = 0;
  double max_rel_error = 0.0;
};

// Central differences of cross_entropy(target, forward(model, x).probs) for every parameter.
BackwardCheck check_backward(const MlpModel& model, std::span<const double> x,
                             std::span<const double> target, double step = 1e-5);

struct MetaGradCheck {
  std::size_t samples = 0;
  double max_omega_rel_error = 0.0;  // analytic omega gradient vs finite difference
  std::size_t lambda_checked = 0;    // |d_i| above the sign threshold
  std::size_t lambda_sign_mismatches = 0;
};

// One (model, batch, validation) instance. `probe_omega` is the omega configuration of the
// virtual step (all zeros reproduces the evaluation at omega = 0).
MetaGradCheck check_meta_gradient(const MlpModel& model, const Dataset& ds,
                                  std::span<const std::size_t> batch,
                                  std::span<const std::size_t> val, std::span<const double> probe_omega,
                                  double lambda0, double eta_theta, double step = 1e-3,
                                  double sign_threshold = 1e-8);

// Random last-layer features for selection tests: z ~ N(0,1)^zdim, g = softmax(N(0,1)^C) - onehot.
FeatureTable random_feature_table(std::size_t n, int num_classes, std::size_t zdim, std::uint64_t seed);

enum class NaiveObjective { kInfo, kClean, kWeightSum };

double naive_objective(NaiveObjective obj, std::span<const std::size_t> subset,
                       std::span<const std::size_t> pool, const FeatureTable& f);

// Classes ascending; each step scans unselected candidates in ascending row order and keeps the
// first strict maximum of the full objective recomputed from scratch.
std::vector<std::size_t> naive_greedy(NaiveObjective obj, std::span<const std::size_t> candidates,
                                      std::span<const std::size_t> pool, const FeatureTable& f,
                                      std::size_t quota);

struct BatteryResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

BatteryResult backward_battery(int seeds = 20);
BatteryResult meta_gradient_battery(int instances = 25);
BatteryResult greedy_battery(int instances = 100);
// Greedy / optimum ratio on tiny instances; informational, passes when every search completes.
BatteryResult brute_force_battery(int instances = 50);

}  // namespace metaval::oracle
