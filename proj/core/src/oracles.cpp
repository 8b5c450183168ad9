#include "metaval/oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include "metaval/meta_engine.hpp"

namespace metaval::oracle {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

BackwardCheck check_backward(const MlpModel& model, std::span<const double> x,
                             std::span<const double> target, double step) {
  const auto analytic = backward(model, forward(model, x), target).flat();
  auto params = model.flat_params();
  MlpModel probe = model;
  BackwardCheck out;
  out.params = params.size();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double orig = params[k];
    params[k] = orig + step;
    probe.set_flat_params(params);
    const double up = cross_entropy(target, forward(probe, x).probs);
    params[k] = orig - step;
    probe.set_flat_params(params);
    const double down = cross_entropy(target, forward(probe, x).probs);
    params[k] = orig;
    const double numeric = (up - down) / (2.0 * step);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[k], numeric, 1e-6));
  }
  return out;
}

namespace {

double val_loss_after_step(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> batch,
                           std::span<const std::size_t> val, std::span<const double> omega,
                           std::span<const double> lambdas, double eta) {
  const MlpModel next = virtual_step(model, ds, batch, omega, lambdas, eta, UpdateScope::kLastLayerWeights);
  double s = 0.0;
  for (auto j : val) s += cross_entropy(ds.observed_one_hot(j), forward(next, ds.features.row(j)).probs);
  return s / static_cast<double>(val.size());
}

}  // namespace

MetaGradCheck check_meta_gradient(const MlpModel& model, const Dataset& ds,
                                  std::span<const std::size_t> batch,
                                  std::span<const std::size_t> val, std::span<const double> probe_omega,
                                  double lambda0, double eta_theta, double step, double sign_threshold) {
  const std::size_t B = batch.size();
  std::vector<double> omega(probe_omega.begin(), probe_omega.end());
  std::vector<double> lambdas(B, lambda0);
  const MlpModel probe = virtual_step(model, ds, batch, omega, lambdas, eta_theta, UpdateScope::kLastLayerWeights);
  const BatchView train_view = view_batch(model, ds, batch);
  const BatchView val_view = view_batch(probe, ds, val);
  const double eta_omega = 1.0;
  const auto align = omega_alignment(train_view, val_view, lambda0, eta_omega);
  const auto dlam = lambda_gradient(train_view, val_view, omega, eta_theta);

  // Chain rule: d(mean val loss)/d omega_i = -(eta_theta / B) / eta_omega * alignment_i.
  std::vector<double> analytic(B), numeric(B);
  double scale = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    analytic[i] = -eta_theta / static_cast<double>(B) / eta_omega * align[i];
    const double orig = omega[i];
    omega[i] = orig + step;
    const double up = val_loss_after_step(model, ds, batch, val, omega, lambdas, eta_theta);
    omega[i] = orig - step;
    const double down = val_loss_after_step(model, ds, batch, val, omega, lambdas, eta_theta);
    omega[i] = orig;
    numeric[i] = (up - down) / (2.0 * step);
    scale = std::max(scale, std::abs(numeric[i]));
  }
  MetaGradCheck out;
  out.samples = B;
  for (std::size_t i = 0; i < B; ++i) {
    out.max_omega_rel_error =
        std::max(out.max_omega_rel_error, relative_error(analytic[i], numeric[i], 1e-6 * scale));
  }

  for (std::size_t i = 0; i < B; ++i) {
    if (std::abs(dlam[i]) <= sign_threshold) continue;
    const double orig = lambdas[i];
    const double h = std::min({step, orig, 1.0 - orig}) > 0.0 ? std::min({step, orig, 1.0 - orig}) : step;
    lambdas[i] = orig + h;
    const double up = val_loss_after_step(model, ds, batch, val, omega, lambdas, eta_theta);
    lambdas[i] = orig - h;
    const double down = val_loss_after_step(model, ds, batch, val, omega, lambdas, eta_theta);
    lambdas[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    ++out.lambda_checked;
    if ((fd > 0.0) != (dlam[i] > 0.0)) ++out.lambda_sign_mismatches;
  }
  return out;
}

FeatureTable random_feature_table(std::size_t n, int num_classes, std::size_t zdim, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xfea7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  FeatureTable f;
  f.num_classes = num_classes;
  f.z = Matrix(n, zdim);
  f.g = Matrix(n, static_cast<std::size_t>(num_classes));
  f.cls.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : f.z.row(i)) v = gauss(rng);
    Vec logits(static_cast<std::size_t>(num_classes));
    for (double& v : logits) v = gauss(rng);
    const Vec p = softmax(logits);
    f.cls[i] = cls(rng);
    for (std::size_t k = 0; k < p.size(); ++k) {
      f.g(i, k) = p[k] - (static_cast<int>(k) == f.cls[i] ? 1.0 : 0.0);
    }
  }
  return f;
}

namespace {

double zz(const FeatureTable& f, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t k = 0; k < f.z.cols(); ++k) s += f.z(a, k) * f.z(b, k);
  return s;
}

double gg(const FeatureTable& f, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t k = 0; k < f.g.cols(); ++k) s += f.g(a, k) * f.g(b, k);
  return s;
}

bool in(std::span<const std::size_t> set, std::size_t x) {
  return std::find(set.begin(), set.end(), x) != set.end();
}

}  // namespace

double naive_objective(NaiveObjective obj, std::span<const std::size_t> subset,
                       std::span<const std::size_t> pool, const FeatureTable& f) {
  double total = 0.0;
  if (obj == NaiveObjective::kInfo) {
    for (auto i : pool) {
      if (in(subset, i)) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (auto j : subset) {
        if (f.cls[j] == f.cls[i]) best = std::max(best, zz(f, j, i) * gg(f, j, i));
      }
      if (best != -std::numeric_limits<double>::infinity()) total += best;
    }
    return total;
  }
  for (auto i : pool) {
    if (in(subset, i)) continue;
    for (auto j : subset) {
      if (f.cls[j] != f.cls[i]) continue;
      total += obj == NaiveObjective::kClean ? zz(f, j, i) : zz(f, j, i) * gg(f, j, i);
    }
  }
  return total;
}

std::vector<std::size_t> naive_greedy(NaiveObjective obj, std::span<const std::size_t> candidates,
                                      std::span<const std::size_t> pool, const FeatureTable& f,
                                      std::size_t quota) {
  std::vector<std::size_t> chosen;
  for (int c = 0; c < f.num_classes; ++c) {
    std::vector<std::size_t> mine;
    for (auto i : candidates) {
      if (f.cls[i] == c) mine.push_back(i);
    }
    std::sort(mine.begin(), mine.end());
    for (std::size_t step = 0; step < quota && step < mine.size(); ++step) {
      bool found = false;
      std::size_t best = 0;
      double best_val = 0.0;
      for (auto a : mine) {
        if (in(chosen, a)) continue;
        auto trial = chosen;
        trial.push_back(a);
        // Only class c changes between trials; score it on its own so that other classes'
        // terms cannot perturb the comparison through rounding.
        std::vector<std::size_t> pool_c, trial_c;
        for (auto i : pool) if (f.cls[i] == c) pool_c.push_back(i);
        for (auto i : trial) if (f.cls[i] == c) trial_c.push_back(i);
        const double v = naive_objective(obj, trial_c, pool_c, f);
        if (!found || v > best_val) {
          found = true;
          best = a;
          best_val = v;
        }
      }
      chosen.push_back(best);
    }
  }
  return chosen;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

Dataset random_dataset(std::size_t n, std::size_t d, int C, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xd5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, C - 1);
  Dataset ds;
  ds.num_classes = C;
  ds.features = Matrix(n, d);
  for (double& v : ds.features.flat()) v = gauss(rng);
  ds.observed_labels.resize(n);
  for (auto& y : ds.observed_labels) y = cls(rng);
  ds.clean_labels = ds.observed_labels;
  ds.openset_mask.assign(n, false);
  return ds;
}

}  // namespace

BatteryResult backward_battery(int seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::vector<std::size_t>> shapes = {{2, 5, 3}, {3, 6, 4}, {2, 4, 4, 3}, {4, 7, 2}};
  double worst = 0.0;
  std::size_t max_params = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto& dims = shapes[static_cast<std::size_t>(s) % shapes.size()];
    const MlpModel m = MlpModel::init(dims, static_cast<std::uint64_t>(1000 + s));
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 0xbac);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec x(dims.front());
    for (double& v : x) v = gauss(rng);
    Vec logits(dims.back());
    for (double& v : logits) v = gauss(rng);
    const Vec target = softmax(logits);
    const auto r = check_backward(m, x, target);
    worst = std::max(worst, r.max_rel_error);
    max_params = std::max(max_params, r.params);
  }
  BatteryResult out{"backward-vs-finite-differences", worst <= 1e-4, {}, seconds_since(t0)};
  out.detail = fmt("max relative error %.3e over %.0f seeds (<= %.0f params)", worst, seeds,
                   static_cast<double>(max_params));
  return out;
}

BatteryResult meta_gradient_battery(int instances) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::vector<std::size_t>> shapes = {{2, 8, 3}, {3, 10, 4}, {2, 6, 6, 3}};
  double worst = 0.0;
  std::size_t checked = 0, mismatches = 0;
  for (int s = 0; s < instances; ++s) {
    const auto& dims = shapes[static_cast<std::size_t>(s) % shapes.size()];
    const auto C = static_cast<int>(dims.back());
    const Dataset ds = random_dataset(24, dims.front(), C, static_cast<std::uint64_t>(s));
    const MlpModel m = MlpModel::init(dims, static_cast<std::uint64_t>(500 + s));
    std::vector<std::size_t> batch, val;
    for (std::size_t i = 0; i < 16; ++i) batch.push_back(i);
    for (std::size_t i = 16; i < 24; ++i) val.push_back(i);
    for (double w : {0.0, 1.0}) {
      const std::vector<double> omega(batch.size(), w);
      const auto r = check_meta_gradient(m, ds, batch, val, omega, 0.9, 1e-3);
      worst = std::max(worst, r.max_omega_rel_error);
      checked += r.lambda_checked;
      mismatches += r.lambda_sign_mismatches;
    }
  }
  BatteryResult out{"meta-gradient-vs-finite-differences", worst <= 1e-3 && mismatches == 0, {},
                    seconds_since(t0)};
  out.detail = fmt("omega max relative error %.3e; lambda sign mismatches %.0f of %.0f", worst,
                   static_cast<double>(mismatches), static_cast<double>(checked));
  return out;
}

BatteryResult greedy_battery(int instances) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t mismatches = 0;
  for (int s = 0; s < instances; ++s) {
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 0x9eed);
    const std::size_t n = 8 + rng() % 33;  // 8..40
    const int C = 2 + static_cast<int>(rng() % 3);
    const FeatureTable f = random_feature_table(n, C, 3 + rng() % 4, static_cast<std::uint64_t>(s));
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i) pool.push_back(i);
    const std::size_t K = 2 + rng() % 5;
    const std::size_t M = 1 + rng() % (K - 1);

    const auto lower = greedy_lower(pool, f, K).sequence;
    if (lower != naive_greedy(NaiveObjective::kInfo, pool, pool, f, K)) ++mismatches;
    const auto upper = greedy_upper(lower, pool, f, M, K).sequence;
    if (upper != naive_greedy(NaiveObjective::kClean, lower, pool, f, M)) ++mismatches;
    const auto wsum = greedy_weight_sum(pool, f, M).sequence;
    if (wsum != naive_greedy(NaiveObjective::kWeightSum, pool, pool, f, M)) ++mismatches;
  }
  BatteryResult out{"greedy-vs-naive-reference", mismatches == 0, {}, seconds_since(t0)};
  out.detail = fmt("%.0f sequence mismatches over %.0f instances x 3 selectors", static_cast<double>(mismatches),
                   instances);
  return out;
}

BatteryResult brute_force_battery(int instances) {
  const auto t0 = std::chrono::steady_clock::now();
  double min_info = std::numeric_limits<double>::infinity();
  double min_clean = std::numeric_limits<double>::infinity();
  double sum_info = 0.0, sum_clean = 0.0;
  int n_info = 0, n_clean = 0;
  for (int s = 0; s < instances; ++s) {
    Rng rng = make_rng(static_cast<std::uint64_t>(s), 0xb7f);
    const std::size_t n = 8 + rng() % 7;  // 8..14
    const FeatureTable f = random_feature_table(n, 2, 3, static_cast<std::uint64_t>(7000 + s));
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i) pool.push_back(i);
    const std::size_t per_class = 2;

    const auto opt_info = brute_force_oracle(pool, f, OracleObjective::kInfo, per_class);
    const double greedy_info = info_objective(greedy_lower(pool, f, per_class).sequence, pool, f);
    const auto opt_clean = brute_force_oracle(pool, f, OracleObjective::kClean, per_class);
    const double greedy_clean = clean_objective(greedy_upper(pool, pool, f, per_class, per_class + 1).sequence, pool, f);
    if (opt_info.value > 0.0) {
      const double r = greedy_info / opt_info.value;
      min_info = std::min(min_info, r);
      sum_info += r;
      ++n_info;
    }
    if (opt_clean.value > 0.0) {
      const double r = greedy_clean / opt_clean.value;
      min_clean = std::min(min_clean, r);
      sum_clean += r;
      ++n_clean;
    }
  }
  BatteryResult out{"greedy-vs-brute-force-ratio", true, {}, seconds_since(t0)};
  out.detail = fmt("info ratio mean %.4f min %.4f", n_info ? sum_info / n_info : 0.0, min_info) + "; " +
               fmt("clean ratio mean %.4f min %.4f", n_clean ? sum_clean / n_clean : 0.0, min_clean);
  return out;
}

}  // namespace metaval::oracle
