#include "metaval/utility_select.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "metaval/errors.hpp"

namespace metaval {

namespace {

FeatureTable features_with_targets(const MlpModel& model, const Dataset& ds,
                                   std::span<const Vec> targets) {
  FeatureTable f;
  f.num_classes = ds.num_classes;
  f.z = Matrix(ds.size(), model.feature_dim());
  f.g = Matrix(ds.size(), model.num_classes());
  f.cls = ds.observed_labels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto tr = forward(model, ds.features.row(i));
    const Vec target = targets.empty() ? ds.observed_one_hot(i) : targets[i];
    const auto v = extract_last_layer(tr, target);
    std::copy(v.z.begin(), v.z.end(), f.z.row(i).begin());
    std::copy(v.g.begin(), v.g.end(), f.g.row(i).begin());
  }
  return f;
}

// Pool members grouped by class, ascending row index inside each class.
std::vector<std::vector<std::size_t>> group_by_class(std::span<const std::size_t> rows,
                                                     const FeatureTable& f) {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(f.num_classes));
  for (auto r : rows) groups[static_cast<std::size_t>(f.cls[r])].push_back(r);
  for (auto& g : groups) std::sort(g.begin(), g.end());
  return groups;
}

bool contains(std::span<const std::size_t> sorted, std::size_t x) {
  return std::binary_search(sorted.begin(), sorted.end(), x);
}

std::vector<std::size_t> sorted_copy(std::span<const std::size_t> v) {
  std::vector<std::size_t> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

enum class Aggregate { kMax, kSum };

// One class of the greedy template. pair(c, m) is the contribution candidate c offers to pool
// member m. Each step adds the candidate maximising the objective over the unselected members;
// running per-member state keeps every evaluation linear in the member count.
std::vector<std::size_t> greedy_one_class(const std::vector<std::size_t>& candidates,
                                          const std::vector<std::size_t>& members,
                                          std::size_t quota, Aggregate agg, const Matrix& pair) {
  const std::size_t nc = candidates.size();
  const std::size_t nm = members.size();
  std::vector<double> state(nm, 0.0);
  std::vector<bool> has(nm, false);
  std::vector<bool> member_taken(nm, false);
  std::vector<bool> cand_taken(nc, false);
  // Candidate -> member slot (or npos when the candidate is not a pool member).
  std::vector<std::size_t> slot(nc, std::numeric_limits<std::size_t>::max());
  for (std::size_t c = 0; c < nc; ++c) {
    auto it = std::lower_bound(members.begin(), members.end(), candidates[c]);
    if (it != members.end() && *it == candidates[c]) slot[c] = static_cast<std::size_t>(it - members.begin());
  }

  std::vector<std::size_t> picked;
  const std::size_t steps = std::min(quota, nc);
  for (std::size_t step = 0; step < steps; ++step) {
    std::size_t best = nc;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < nc; ++c) {
      if (cand_taken[c]) continue;
      double score = 0.0;
      for (std::size_t m = 0; m < nm; ++m) {
        if (member_taken[m] || m == slot[c]) continue;
        const double v = pair(c, m);
        if (agg == Aggregate::kMax) {
          score += has[m] ? std::max(state[m], v) : v;
        } else {
          score += state[m] + v;
        }
      }
      if (best == nc || score > best_score) {
        best = c;
        best_score = score;
      }
    }
    cand_taken[best] = true;
    if (slot[best] != std::numeric_limits<std::size_t>::max()) member_taken[slot[best]] = true;
    for (std::size_t m = 0; m < nm; ++m) {
      const double v = pair(best, m);
      if (agg == Aggregate::kMax) {
        state[m] = has[m] ? std::max(state[m], v) : v;
        has[m] = true;
      } else {
        state[m] += v;
      }
    }
    picked.push_back(candidates[best]);
  }
  return picked;
}

template <class Fn>
Matrix pair_matrix(const std::vector<std::size_t>& candidates, const std::vector<std::size_t>& members,
                   Fn fn) {
  Matrix p(candidates.size(), members.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    for (std::size_t m = 0; m < members.size(); ++m) p(c, m) = fn(candidates[c], members[m]);
  }
  return p;
}

template <class PairFn>
GreedyResult run_greedy(std::span<const std::size_t> candidates, std::span<const std::size_t> pool,
                        const FeatureTable& f, std::size_t quota, Aggregate agg, PairFn fn) {
  const auto cand_groups = group_by_class(candidates, f);
  const auto pool_groups = group_by_class(pool, f);
  GreedyResult out;
  for (int c = 0; c < f.num_classes; ++c) {
    const auto& cands = cand_groups[static_cast<std::size_t>(c)];
    const auto& members = pool_groups[static_cast<std::size_t>(c)];
    if (cands.size() < quota) out.short_classes.push_back(c);
    if (cands.empty()) continue;
    const Matrix pm = pair_matrix(cands, members, fn);
    const auto picked = greedy_one_class(cands, members, quota, agg, pm);
    out.sequence.insert(out.sequence.end(), picked.begin(), picked.end());
  }
  return out;
}

}  // namespace

FeatureTable compute_features(const MlpModel& model, const Dataset& ds) {
  return features_with_targets(model, ds, {});
}

FeatureTable compute_features(const MlpModel& model, const Dataset& ds,
                              std::span<const Vec> robust_labels) {
  if (robust_labels.size() != ds.size()) throw InputError("one robust label per row required");
  return features_with_targets(model, ds, robust_labels);
}

double iota(std::span<const double> z_i, std::span<const double> g_i, std::span<const double> z_j,
            std::span<const double> g_j) {
  if (z_i.size() != z_j.size() || g_i.size() != g_j.size()) {
    throw InputError("iota operands have mismatched dimensions");
  }
  return dot(z_j, z_i) * dot(g_j, g_i);
}

double iota(const FeatureTable& f, std::size_t i, std::size_t j) {
  return dot(f.z.row(j), f.z.row(i)) * dot(f.g.row(j), f.g.row(i));
}

double info_objective(std::span<const std::size_t> candidate, std::span<const std::size_t> pool,
                      const FeatureTable& f) {
  const auto cand = sorted_copy(candidate);
  double total = 0.0;
  for (auto i : pool) {
    if (contains(cand, i)) continue;
    bool any = false;
    double best = 0.0;
    for (auto j : cand) {
      if (f.cls[j] != f.cls[i]) continue;
      const double v = iota(f, i, j);
      best = any ? std::max(best, v) : v;
      any = true;
    }
    total += best;
  }
  return total;
}

double clean_objective(std::span<const std::size_t> subset, std::span<const std::size_t> pool,
                       const FeatureTable& f, CleanMetric metric) {
  const auto sub = sorted_copy(subset);
  double total = 0.0;
  for (auto j : sub) {
    for (auto i : pool) {
      if (f.cls[i] != f.cls[j] || contains(sub, i)) continue;
      total += metric == CleanMetric::kDot ? dot(f.z.row(j), f.z.row(i)) : cosine(f.z.row(j), f.z.row(i));
    }
  }
  return total;
}

double weight_sum_objective(std::span<const std::size_t> subset, std::span<const std::size_t> pool,
                            const FeatureTable& f) {
  const auto sub = sorted_copy(subset);
  double total = 0.0;
  for (auto j : sub) {
    for (auto i : pool) {
      if (f.cls[i] != f.cls[j] || contains(sub, i)) continue;
      total += iota(f, i, j);
    }
  }
  return total;
}

GreedyResult greedy_lower(std::span<const std::size_t> pool, const FeatureTable& f, std::size_t K) {
  if (K < 1) throw ConfigError("K must be at least 1");
  auto r = run_greedy(pool, pool, f, K, Aggregate::kMax,
                      [&](std::size_t cand, std::size_t member) { return iota(f, member, cand); });
  r.objective = info_objective(r.sequence, pool, f);
  return r;
}

GreedyResult greedy_upper(std::span<const std::size_t> lower_set, std::span<const std::size_t> pool,
                          const FeatureTable& f, std::size_t M, std::size_t K, CleanMetric metric) {
  if (M < 1) throw ConfigError("M must be at least 1");
  if (M >= K) throw ConfigError("M must be smaller than K");
  auto r = run_greedy(lower_set, pool, f, M, Aggregate::kSum, [&](std::size_t cand, std::size_t member) {
    return metric == CleanMetric::kDot ? dot(f.z.row(cand), f.z.row(member))
                                       : cosine(f.z.row(cand), f.z.row(member));
  });
  r.objective = clean_objective(r.sequence, pool, f, metric);
  return r;
}

GreedyResult greedy_weight_sum(std::span<const std::size_t> pool, const FeatureTable& f, std::size_t K) {
  if (K < 1) throw ConfigError("K must be at least 1");
  auto r = run_greedy(pool, pool, f, K, Aggregate::kSum,
                      [&](std::size_t cand, std::size_t member) { return iota(f, member, cand); });
  r.objective = weight_sum_objective(r.sequence, pool, f);
  return r;
}

void fill_training_set(SelectionResult& r, std::size_t dataset_size,
                       std::span<const std::size_t> clean_reference, TrainingSetRule rule) {
  r.training_set.clear();
  if (rule == TrainingSetRule::kAllButValidation) {
    for (std::size_t i = 0; i < dataset_size; ++i) {
      if (!contains(r.validation_set, i)) r.training_set.push_back(i);
    }
  } else {
    for (auto i : sorted_copy(clean_reference)) {
      if (!contains(r.validation_set, i)) r.training_set.push_back(i);
    }
  }
}

SelectionResult max_utility(std::span<const std::size_t> pool,
                            std::span<const std::size_t> clean_reference, const FeatureTable& f,
                            const SelectionParams& params, std::size_t dataset_size) {
  if (params.M >= params.K) throw ConfigError("M must be smaller than K");
  const std::span<const std::size_t> reference = clean_reference.empty() ? pool : clean_reference;
  SelectionResult r;
  const auto lower = params.lower == LowerObjective::kInfo ? greedy_lower(pool, f, params.K)
                                                          : greedy_weight_sum(pool, f, params.K);
  r.lower_sequence = lower.sequence;
  r.lower_set = sorted_copy(lower.sequence);
  r.lower_objective = lower.objective;
  const auto upper = greedy_upper(r.lower_set, reference, f, params.M, params.K, params.clean_metric);
  r.upper_sequence = upper.sequence;
  r.validation_set = sorted_copy(upper.sequence);
  r.upper_objective = upper.objective;
  for (int c : lower.short_classes) {
    r.warnings.push_back("class " + std::to_string(c) + " supplies fewer than K=" +
                         std::to_string(params.K) + " candidates");
  }
  for (int c : upper.short_classes) {
    r.warnings.push_back("class " + std::to_string(c) + " supplies fewer than M=" +
                         std::to_string(params.M) + " validation samples");
  }
  fill_training_set(r, dataset_size, reference, params.training_rule);
  return r;
}

std::vector<std::string> check_selection(const SelectionResult& r, std::span<const std::size_t> pool,
                                         std::span<const std::size_t> clean_set,
                                         const FeatureTable& f, std::size_t M, std::size_t K,
                                         std::size_t dataset_size) {
  std::vector<std::string> bad;
  const auto pool_s = sorted_copy(pool);
  const auto clean_s = sorted_copy(clean_set);
  for (auto v : r.validation_set) {
    if (!contains(r.lower_set, v)) bad.push_back("validation row " + std::to_string(v) + " not in lower set");
  }
  for (auto v : r.lower_set) {
    if (!contains(pool_s, v)) bad.push_back("lower row " + std::to_string(v) + " not in pool");
  }
  for (auto v : pool_s) {
    if (!clean_s.empty() && !contains(clean_s, v)) {
      bad.push_back("pool row " + std::to_string(v) + " not in clean set");
    }
  }
  if (!(M < K)) bad.push_back("M must be smaller than K");

  const auto C = static_cast<std::size_t>(f.num_classes);
  std::vector<std::size_t> avail(C, 0), nl(C, 0), nv(C, 0);
  for (auto i : pool_s) ++avail[static_cast<std::size_t>(f.cls[i])];
  for (auto i : r.lower_set) ++nl[static_cast<std::size_t>(f.cls[i])];
  for (auto i : r.validation_set) ++nv[static_cast<std::size_t>(f.cls[i])];
  for (std::size_t c = 0; c < C; ++c) {
    if (nl[c] != std::min(K, avail[c])) bad.push_back("class " + std::to_string(c) + " lower count off cap");
    if (nv[c] != std::min(M, nl[c])) bad.push_back("class " + std::to_string(c) + " validation count off cap");
  }

  std::vector<int> seen(dataset_size, 0);
  for (auto i : r.training_set) {
    if (i >= dataset_size) bad.push_back("training row out of range");
    else ++seen[i];
  }
  for (auto i : r.validation_set) {
    if (i >= dataset_size) bad.push_back("validation row out of range");
    else if (seen[i] > 0) bad.push_back("row " + std::to_string(i) + " in both training and validation");
    else ++seen[i];
  }
  for (std::size_t i = 0; i < dataset_size; ++i) {
    if (seen[i] != 1) {
      bad.push_back("row " + std::to_string(i) + " covered " + std::to_string(seen[i]) + " times");
      break;
    }
  }
  return bad;
}

namespace {

void combinations(const std::vector<std::size_t>& items, std::size_t k, std::size_t start,
                  std::vector<std::size_t>& cur, std::vector<std::vector<std::size_t>>& out) {
  if (cur.size() == k) {
    out.push_back(cur);
    return;
  }
  for (std::size_t i = start; i + (k - cur.size()) <= items.size(); ++i) {
    cur.push_back(items[i]);
    combinations(items, k, i + 1, cur, out);
    cur.pop_back();
  }
}

double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(r);
}

}  // namespace

OracleResult brute_force_oracle(std::span<const std::size_t> pool, const FeatureTable& f,
                                OracleObjective objective, std::size_t per_class) {
  if (per_class < 1) throw ConfigError("per_class must be at least 1");
  const auto groups = group_by_class(pool, f);
  double total = 1.0;
  for (const auto& g : groups) total *= binomial(g.size(), std::min(per_class, g.size()));
  if (total > static_cast<double>(kBruteForceLimit)) {
    throw ConfigError("brute-force search would enumerate " + std::to_string(static_cast<long long>(total)) +
                      " subsets (limit " + std::to_string(kBruteForceLimit) + ")");
  }
  std::vector<std::vector<std::vector<std::size_t>>> per_group;
  for (const auto& g : groups) {
    std::vector<std::vector<std::size_t>> combos;
    std::vector<std::size_t> cur;
    combinations(g, std::min(per_class, g.size()), 0, cur, combos);
    per_group.push_back(std::move(combos));
  }

  OracleResult best;
  best.value = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> odo(per_group.size(), 0);
  while (true) {
    std::vector<std::size_t> subset;
    for (std::size_t g = 0; g < per_group.size(); ++g) {
      subset.insert(subset.end(), per_group[g][odo[g]].begin(), per_group[g][odo[g]].end());
    }
    std::sort(subset.begin(), subset.end());
    const double v = objective == OracleObjective::kInfo ? info_objective(subset, pool, f)
                                                         : clean_objective(subset, pool, f);
    ++best.evaluated;
    if (v > best.value) {
      best.value = v;
      best.subset = subset;
    }
    std::size_t g = 0;
    for (; g < odo.size(); ++g) {
      if (++odo[g] < per_group[g].size()) break;
      odo[g] = 0;
    }
    if (g == odo.size()) break;
  }
  return best;
}

}  // namespace metaval
