#include "metaval/clean_detect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "metaval/errors.hpp"

namespace metaval {

namespace {

double mean_ce(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows) {
  double s = 0.0;
  for (auto i : rows) s += cross_entropy(ds.observed_one_hot(i), forward(model, ds.features.row(i)).probs);
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

}  // namespace

MlpModel warmup_train(const MlpModel& init, const Dataset& ds, const WarmupConfig& cfg) {
  if (cfg.max_epochs < 1) throw ConfigError("warm-up needs max_epochs >= 1");
  if (cfg.batch_size < 1) throw ConfigError("warm-up needs batch_size >= 1");
  Rng rng = make_rng(cfg.seed, 0x3a3a);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(ds.size())));
  if (ds.size() >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, ds.size() - 1);
  std::vector<std::size_t> holdout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  MlpModel model = init;
  MlpModel best = init;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train.size(), start + cfg.batch_size);
      GradientBundle acc = GradientBundle::zeros_like(model);
      for (std::size_t k = start; k < end; ++k) {
        const auto i = train[k];
        const auto tr = forward(model, ds.features.row(i));
        acc.accumulate(backward(model, tr, ds.observed_one_hot(i)), 1.0);
      }
      model = sgd_step(model, acc, cfg.eta / static_cast<double>(end - start));
    }
    const double loss = holdout.empty() ? 0.0 : mean_ce(model, ds, holdout);
    if (loss < best_loss) {
      best_loss = loss;
      best = model;
      stale = 0;
    } else if (++stale > cfg.patience) {
      break;
    }
  }
  return best;
}

std::vector<double> per_sample_losses(const MlpModel& model, const Dataset& ds) {
  std::vector<double> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out[i] = cross_entropy(ds.observed_one_hot(i), forward(model, ds.features.row(i)).probs);
  }
  return out;
}

namespace {

constexpr double kVarFloor = 1e-6;

double log_normal(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

GaussianMixture1d fit_gmm_1d(std::span<const double> values, int max_iter, double tol) {
  const std::size_t n = values.size();
  if (n < 2) throw InputError("mixture fit needs at least two values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());

  GaussianMixture1d g{};
  const std::size_t half = n / 2;
  auto moments = [&](std::size_t lo, std::size_t hi, int k) {
    double m = 0.0;
    for (std::size_t i = lo; i < hi; ++i) m += sorted[i];
    m /= static_cast<double>(hi - lo);
    double v = 0.0;
    for (std::size_t i = lo; i < hi; ++i) v += (sorted[i] - m) * (sorted[i] - m);
    g.mean[k] = m;
    g.var[k] = v / static_cast<double>(hi - lo) + kVarFloor;
    g.weight[k] = static_cast<double>(hi - lo) / static_cast<double>(n);
  };
  moments(0, half, 0);
  moments(half, n, 1);

  std::vector<double> resp(n);  // responsibility of component 0
  double prev = -std::numeric_limits<double>::infinity();
  g.iterations = 0;
  for (int it = 0; it < max_iter; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::log(g.weight[0]) + log_normal(values[i], g.mean[0], g.var[0]);
      const double b = std::log(g.weight[1]) + log_normal(values[i], g.mean[1], g.var[1]);
      const double lse = log_sum_exp(a, b);
      resp[i] = std::exp(a - lse);
      ll += lse;
    }
    ll /= static_cast<double>(n);
    g.log_likelihood = ll;
    g.iterations = it + 1;

    for (int k = 0; k < 2; ++k) {
      double nk = 0.0;
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = k == 0 ? resp[i] : 1.0 - resp[i];
        nk += r;
        m += r * values[i];
      }
      nk = std::max(nk, 1e-12);
      m /= nk;
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = k == 0 ? resp[i] : 1.0 - resp[i];
        v += r * (values[i] - m) * (values[i] - m);
      }
      g.weight[k] = std::clamp(nk / static_cast<double>(n), 1e-12, 1.0);
      g.mean[k] = m;
      g.var[k] = v / nk + kVarFloor;
    }
    if (std::abs(ll - prev) < tol) break;
    prev = ll;
  }
  if (g.mean[1] < g.mean[0]) {
    std::swap(g.weight[0], g.weight[1]);
    std::swap(g.mean[0], g.mean[1]);
    std::swap(g.var[0], g.var[1]);
  }
  return g;
}

PartitionResult partition_small_loss(std::span<const double> losses) {
  const std::size_t n = losses.size();
  if (n < 2) throw InputError("partition needs at least two samples");
  PartitionResult out;
  out.clean_posteriors.resize(n);
  const GaussianMixture1d g = fit_gmm_1d(losses);

  if (g.mean[1] - g.mean[0] < 1e-3) {
    out.used_fallback = true;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
    std::vector<bool> clean(n, false);
    for (std::size_t k = 0; k < (n + 1) / 2; ++k) clean[order[k]] = true;
    for (std::size_t i = 0; i < n; ++i) {
      out.clean_posteriors[i] = clean[i] ? 1.0 : 0.0;
      (clean[i] ? out.clean_idx : out.noisy_idx).push_back(i);
    }
    return out;
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double a = std::log(g.weight[0]) + log_normal(losses[i], g.mean[0], g.var[0]);
    const double b = std::log(g.weight[1]) + log_normal(losses[i], g.mean[1], g.var[1]);
    double post = std::exp(a - log_sum_exp(a, b));
    // Beyond the high-loss mean the posterior can swing back when var[0] > var[1]; a loss that
    // large is never called clean.
    if (losses[i] > g.mean[1]) post = 0.0;
    out.clean_posteriors[i] = post;
    (post > 0.5 ? out.clean_idx : out.noisy_idx).push_back(i);
  }
  return out;
}

void SampleState::push_prediction(const Vec& p, std::size_t window) {
  pred_window.push_back(p);
  while (pred_window.size() > window) pred_window.pop_front();
}

bool update_moving_avg(SampleState& state, double kappa, std::size_t window) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw InputError("kappa must lie in [0, 1]");
  if (window == 0 || state.pred_window.size() < window) return false;
  const std::size_t C = state.pred_window.front().size();
  if (state.robust_label.size() != C) throw InputError("robust label has wrong size");
  Vec mean(C, 0.0);
  for (const auto& p : state.pred_window) {
    for (std::size_t k = 0; k < C; ++k) mean[k] += p[k];
  }
  const double inv = 1.0 / static_cast<double>(state.pred_window.size());
  for (std::size_t k = 0; k < C; ++k) {
    state.robust_label[k] = kappa * state.robust_label[k] + (1.0 - kappa) * (mean[k] * inv);
  }
  return true;
}

int argmax_lowest(std::span<const double> v) {
  int best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

CandidateSubset build_candidate_subset(std::span<const std::size_t> clean_idx,
                                       std::span<const int> observed_labels,
                                       std::span<const Vec> robust_labels, int num_classes,
                                       std::size_t per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("candidate subset needs N >= 1");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (auto i : clean_idx) {
    const int y = observed_labels[i];
    if (argmax_lowest(robust_labels[i]) == y) by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  CandidateSubset out;
  Rng rng = make_rng(seed, 0xcd5e);
  for (int c = 0; c < num_classes; ++c) {
    auto& rows = by_class[static_cast<std::size_t>(c)];
    if (rows.empty()) {
      out.empty_classes.push_back(c);
      continue;
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t take = std::min(per_class, rows.size());
    out.indices.insert(out.indices.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

}  // namespace metaval
