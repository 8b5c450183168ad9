#include <cmath>

#include "doctest.h"
#include "metaval/errors.hpp"
#include "metaval/oracles.hpp"
#include "metaval/utility_select.hpp"

using namespace metaval;
using doctest::Approx;

namespace {

FeatureTable table(const std::vector<Vec>& z, const std::vector<Vec>& g, const std::vector<int>& cls,
                   int C) {
  FeatureTable f;
  f.z = Matrix(z.size(), z.front().size());
  f.g = Matrix(g.size(), g.front().size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    for (std::size_t k = 0; k < z[i].size(); ++k) f.z(i, k) = z[i][k];
    for (std::size_t k = 0; k < g[i].size(); ++k) f.g(i, k) = g[i][k];
  }
  f.cls = cls;
  f.num_classes = C;
  return f;
}

std::vector<std::size_t> iota_range(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

FeatureTable scale_g(FeatureTable f, double c) {
  for (auto& v : f.g.flat()) v *= c;
  return f;
}

}  // namespace

TEST_CASE("iota examples") {
  CHECK(iota(Vec{1, 0}, Vec{1, -1, 0}, Vec{1, 0}, Vec{1, -1, 0}) == 2.0);
  CHECK(iota(Vec{1, 0}, Vec{5, -3, 1}, Vec{0, 4}, Vec{2, 2, 2}) == 0.0);
  // z_j . z_i = 2, g_j . g_i = -0.5
  CHECK(iota(Vec{1, 1}, Vec{0.5, 0}, Vec{1, 1}, Vec{-1, 0}) == -1.0);
  CHECK_THROWS_AS(iota(Vec{1, 0}, Vec{1, 0}, Vec{1, 0, 0}, Vec{1, 0}), InputError);
}

TEST_CASE("iota symmetry and bilinearity") {
  const auto f = oracle::random_feature_table(10, 3, 4, 5);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      CHECK(iota(f, i, j) == Approx(iota(f, j, i)).epsilon(1e-12));
      Vec zi(f.z.row(i).begin(), f.z.row(i).end());
      for (auto& v : zi) v *= 3.0;
      CHECK(iota(zi, f.g.row(i), f.z.row(j), f.g.row(j)) == Approx(3.0 * iota(f, i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("utility features have zero-sum gradients") {
  const auto f = oracle::random_feature_table(30, 4, 3, 2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    double s = 0.0;
    for (double v : f.g.row(i)) s += v;
    CHECK(std::abs(s) < 1e-9);
  }
}

TEST_CASE("info_objective enumeration") {
  const auto f = table({{1, 0}, {0.5, 0.5}, {2, -1}}, {{0.2, -0.2}, {-0.4, 0.4}, {0.1, -0.1}}, {0, 0, 0}, 2);
  const std::vector<std::size_t> pool{0, 1, 2};
  CHECK(info_objective(pool, pool, f) == 0.0);
  const std::vector<std::size_t> cand{0};
  CHECK(info_objective(cand, pool, f) == Approx(iota(f, 1, 0) + iota(f, 2, 0)).epsilon(1e-14));
  const std::vector<std::size_t> two{0, 2};
  CHECK(info_objective(two, pool, f) == Approx(std::max(iota(f, 1, 0), iota(f, 1, 2))).epsilon(1e-14));
}

TEST_CASE("info_objective: classes without candidates contribute zero") {
  const auto f = table({{1, 0}, {1, 1}, {3, 0}}, {{1, -1}, {1, -1}, {-1, 1}}, {0, 0, 1}, 2);
  const std::vector<std::size_t> pool{0, 1, 2};
  const std::vector<std::size_t> cand{0};
  CHECK(info_objective(cand, pool, f) == Approx(iota(f, 1, 0)));
}

TEST_CASE("info_objective with a duplicate of every pool point") {
  const auto base = oracle::random_feature_table(8, 2, 3, 9);
  // Rows 8..15 duplicate rows 0..7.
  FeatureTable f;
  f.z = Matrix(16, 3);
  f.g = Matrix(16, 2);
  f.num_classes = 2;
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t k = 0; k < 3; ++k) f.z(i, k) = base.z(i % 8, k);
    for (std::size_t k = 0; k < 2; ++k) f.g(i, k) = base.g(i % 8, k);
    f.cls.push_back(base.cls[i % 8]);
  }
  std::vector<std::size_t> cand;
  for (std::size_t i = 8; i < 16; ++i) cand.push_back(i);
  const auto pool = iota_range(16);
  double want = 0.0;
  double self = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    double best = -1e300;
    for (auto j : cand) {
      if (f.cls[j] == f.cls[i]) best = std::max(best, iota(f, i, j));
    }
    want += best;
    self += dot(f.z.row(i), f.z.row(i)) * dot(f.g.row(i), f.g.row(i));
  }
  CHECK(info_objective(cand, pool, f) == Approx(want).epsilon(1e-12));
  CHECK(info_objective(cand, pool, f) >= self - 1e-12);
}

TEST_CASE("clean_objective enumeration") {
  const auto two = table({{1, 0}, {1, 0}}, {{0, 0}, {0, 0}}, {0, 0}, 1);
  const std::vector<std::size_t> first{0};
  const std::vector<std::size_t> both{0, 1};
  CHECK(clean_objective(first, both, two) == 1.0);
  CHECK(clean_objective(both, both, two) == 0.0);

  const auto f = oracle::random_feature_table(4, 1, 3, 4);
  const auto pool = iota_range(4);
  const std::vector<std::size_t> sub{1, 3};
  double want = 0.0;
  for (auto j : sub) {
    for (std::size_t i : {0u, 2u}) want += dot(f.z.row(j), f.z.row(i));
  }
  CHECK(std::abs(clean_objective(sub, pool, f) - want) < 1e-10);
}

TEST_CASE("greedy_lower: forced and reference cases") {
  const auto f = oracle::random_feature_table(6, 2, 3, 12);
  const auto pool = iota_range(6);
  std::vector<std::size_t> per(2, 0);
  for (int c : f.cls) ++per[static_cast<std::size_t>(c)];
  const auto whole = greedy_lower(pool, f, 6);
  auto sorted = whole.sequence;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == pool);

  for (std::size_t K = 1; K <= 3; ++K) {
    CHECK(greedy_lower(pool, f, K).sequence ==
          oracle::naive_greedy(oracle::NaiveObjective::kInfo, pool, pool, f, K));
  }
  CHECK_THROWS_AS(greedy_lower(pool, f, 0), ConfigError);
}

TEST_CASE("greedy_upper: forced, reference and M >= K") {
  const auto f = oracle::random_feature_table(20, 2, 3, 13);
  const auto pool = iota_range(20);
  const auto lower = greedy_lower(pool, f, 4).sequence;
  std::vector<std::size_t> lower_sorted = lower;
  std::sort(lower_sorted.begin(), lower_sorted.end());
  for (std::size_t M = 1; M < 4; ++M) {
    CHECK(greedy_upper(lower_sorted, pool, f, M, 4).sequence ==
          oracle::naive_greedy(oracle::NaiveObjective::kClean, lower_sorted, pool, f, M));
  }
  // Lower set with exactly 2 per class, M = 2 selects all of it.
  const auto lower2 = greedy_lower(pool, f, 2).sequence;
  auto up = greedy_upper(lower2, pool, f, 2, 3).sequence;
  std::sort(up.begin(), up.end());
  auto l2 = lower2;
  std::sort(l2.begin(), l2.end());
  CHECK(up == l2);
  CHECK_THROWS_AS(greedy_upper(lower_sorted, pool, f, 4, 4), ConfigError);
  CHECK_THROWS_AS(greedy_upper(lower_sorted, pool, f, 5, 4), ConfigError);
}

TEST_CASE("greedy selectors match the naive reference on random instances") {
  for (std::uint64_t s = 0; s < 60; ++s) {
    const std::size_t n = 6 + s % 35;
    const int C = 1 + static_cast<int>(s % 4);
    const auto f = oracle::random_feature_table(n, C, 1 + s % 5, 1000 + s);
    const auto pool = iota_range(n);
    const std::size_t K = 2 + s % 6;
    const std::size_t M = 1 + s % (K - 1);
    const auto lower = greedy_lower(pool, f, K).sequence;
    CHECK(lower == oracle::naive_greedy(oracle::NaiveObjective::kInfo, pool, pool, f, K));
    CHECK(greedy_upper(lower, pool, f, M, K).sequence ==
          oracle::naive_greedy(oracle::NaiveObjective::kClean, lower, pool, f, M));
    CHECK(greedy_weight_sum(pool, f, K).sequence ==
          oracle::naive_greedy(oracle::NaiveObjective::kWeightSum, pool, pool, f, K));
  }
}

TEST_CASE("greedy is deterministic and invariant to positive gradient scaling") {
  const auto f = oracle::random_feature_table(36, 3, 4, 77);
  const auto pool = iota_range(36);
  const auto a = greedy_lower(pool, f, 5);
  CHECK(a.sequence == greedy_lower(pool, f, 5).sequence);
  // Powers of two scale exactly, so mutual-best-match ties cannot be broken by rounding.
  for (double c : {0.5, 2.0, 4.0, 8.0}) {
    const auto g = scale_g(f, c);
    const auto b = greedy_lower(pool, g, 5);
    CHECK(b.sequence == a.sequence);
    CHECK(b.objective == Approx(c * c * a.objective).epsilon(1e-12));
  }
}

TEST_CASE("max_utility: pool of exactly M per class") {
  FeatureTable f = oracle::random_feature_table(9, 3, 2, 3);
  f.cls = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  const auto pool = iota_range(9);
  const auto r = max_utility(pool, pool, f, {3, 5}, 12);
  CHECK(r.validation_set == pool);
  CHECK(r.training_set == std::vector<std::size_t>{9, 10, 11});
  CHECK(check_selection(r, pool, pool, f, 3, 5, 12).empty());
  CHECK_THROWS_AS(max_utility(pool, pool, f, {5, 5}, 12), ConfigError);
}

TEST_CASE("max_utility: a class absent from the pool is skipped with a warning") {
  FeatureTable f = oracle::random_feature_table(20, 3, 2, 4);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < 20; ++i) {
    if (f.cls[i] != 1) pool.push_back(i);
  }
  const auto r = max_utility(pool, pool, f, {2, 4}, 20);
  for (auto v : r.validation_set) CHECK(f.cls[v] != 1);
  bool warned = false;
  for (const auto& w : r.warnings) warned = warned || w.find("class 1") != std::string::npos;
  CHECK(warned);
  CHECK(check_selection(r, pool, pool, f, 2, 4, 20).empty());
}

TEST_CASE("weight-only lower level keeps the Clean upper level") {
  const auto f = oracle::random_feature_table(30, 2, 3, 21);
  const auto pool = iota_range(30);
  SelectionParams p{2, 5};
  p.lower = LowerObjective::kWeightSum;
  const auto r = max_utility(pool, pool, f, p, 30);
  CHECK(r.lower_sequence == greedy_weight_sum(pool, f, 5).sequence);
  CHECK(r.upper_sequence == greedy_upper(r.lower_set, pool, f, 2, 5).sequence);
  CHECK(check_selection(r, pool, pool, f, 2, 5, 30).empty());
}

TEST_CASE("selection invariants on 100 random instances") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng = make_rng(s, 3);
    const std::size_t n = 20 + rng() % 60;
    const int C = 2 + static_cast<int>(rng() % 3);
    const auto f = oracle::random_feature_table(n, C, 3, s);
    std::vector<std::size_t> clean, pool;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng() % 4 != 0) clean.push_back(i);
    }
    for (auto i : clean) {
      if (rng() % 3 != 0) pool.push_back(i);
    }
    const std::size_t K = 2 + rng() % 8;
    const std::size_t M = 1 + rng() % (K - 1);
    SelectionParams p{M, K};
    const auto r = max_utility(pool, clean, f, p, n);
    const auto bad = check_selection(r, pool, clean, f, M, K, n);
    CHECK_MESSAGE(bad.empty(), (bad.empty() ? std::string() : bad.front()));
  }
}

TEST_CASE("check_selection flags a broken cover") {
  const auto f = oracle::random_feature_table(12, 2, 2, 5);
  const auto pool = iota_range(12);
  auto r = max_utility(pool, pool, f, {1, 3}, 12);
  CHECK(check_selection(r, pool, pool, f, 1, 3, 12).empty());
  r.training_set.push_back(r.validation_set.front());
  CHECK_FALSE(check_selection(r, pool, pool, f, 1, 3, 12).empty());
}

TEST_CASE("brute_force_oracle") {
  const auto f = table({{1, 0}, {0, 1}, {1, 1}, {2, 0}}, {{1, -1}, {-1, 1}, {0.5, -0.5}, {1, -1}}, {0, 0, 1, 1}, 2);
  const auto pool = iota_range(4);
  const auto r = brute_force_oracle(pool, f, OracleObjective::kInfo, 1);
  CHECK(r.evaluated == 4);
  double best = -1e300;
  for (std::size_t a : {0u, 1u}) {
    for (std::size_t b : {2u, 3u}) {
      const std::vector<std::size_t> s{a, b};
      best = std::max(best, info_objective(s, pool, f));
    }
  }
  CHECK(r.value == best);

  const auto all = brute_force_oracle(pool, f, OracleObjective::kClean, 2);
  CHECK(all.evaluated == 1);
  CHECK(all.subset == pool);

  const auto big = oracle::random_feature_table(60, 1, 2, 1);
  CHECK_THROWS_AS(brute_force_oracle(iota_range(60), big, OracleObjective::kInfo, 10), ConfigError);
}

TEST_CASE("greedy never beats the exhaustive optimum") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto f = oracle::random_feature_table(10, 2, 2, 500 + s);
    const auto pool = iota_range(10);
    const auto opt = brute_force_oracle(pool, f, OracleObjective::kInfo, 2);
    CHECK(greedy_lower(pool, f, 2).objective <= opt.value + 1e-12);
    const auto cl = brute_force_oracle(pool, f, OracleObjective::kClean, 2);
    const auto up = greedy_upper(pool, pool, f, 2, 3);
    CHECK(up.objective <= cl.value + 1e-12);
  }
}
