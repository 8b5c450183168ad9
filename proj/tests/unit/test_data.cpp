#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "metaval/data.hpp"
#include "metaval/errors.hpp"

using namespace metaval;
using doctest::Approx;

namespace {

Dataset blobs(int C, std::size_t n, double spread, std::uint64_t seed, std::size_t d = 2) {
  return gen_synthetic({SyntheticKind::kGaussianBlobs, C, n, d, spread}, seed);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("metaval_test_" + name);
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("gen_synthetic: deterministic and well formed") {
  const auto a = blobs(4, 50, 0.3, 7);
  const auto b = blobs(4, 50, 0.3, 7);
  CHECK(a == b);
  CHECK(a.size() == 200);
  CHECK(a.clean_labels == a.observed_labels);
  CHECK_NOTHROW(a.validate());
  CHECK_FALSE(a == blobs(4, 50, 0.3, 8));
  const auto s = gen_synthetic({SyntheticKind::kSpirals, 3, 40, 3, 0.05}, 1);
  CHECK(s.size() == 120);
  CHECK(s.dim() == 3);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("gen_synthetic: near-zero spread is 1-NN separable") {
  const auto ds = blobs(2, 100, 1e-6, 3);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best = 1e300;
    int lab = -1;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < ds.dim(); ++k) {
        const double d = ds.features(i, k) - ds.features(j, k);
        d2 += d * d;
      }
      if (d2 < best) {
        best = d2;
        lab = ds.observed_labels[j];
      }
    }
    correct += lab == ds.observed_labels[i];
  }
  CHECK(correct == ds.size());
}

TEST_CASE("gen_synthetic: blob means sit on the unit circle") {
  const auto ds = blobs(4, 1000, 0.1, 5);
  for (int c = 0; c < 4; ++c) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.observed_labels[i] != c) continue;
      mx += ds.features(i, 0);
      my += ds.features(i, 1);
    }
    mx /= 1000.0;
    my /= 1000.0;
    const double ang = 2.0 * M_PI * c / 4.0;
    CHECK(std::abs(mx - std::cos(ang)) < 0.05);
    CHECK(std::abs(my - std::sin(ang)) < 0.05);
  }
}

TEST_CASE("load_csv: hand-written file") {
  const auto p = temp_file("three.csv");
  write_text(p, "f0,f1,label\n0.5,-1,0\n2,3.25,2\n-0.125,0,1\n");
  const auto ds = load_csv(p);
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 2);
  CHECK(ds.num_classes == 3);
  CHECK(ds.features(0, 0) == 0.5);
  CHECK(ds.features(1, 1) == 3.25);
  CHECK(ds.features(2, 0) == -0.125);
  CHECK(ds.observed_labels == std::vector<int>{0, 2, 1});
  CHECK(ds.clean_labels == ds.observed_labels);
  std::filesystem::remove(p);
}

TEST_CASE("load_csv: errors carry the line number") {
  const auto p = temp_file("bad.csv");
  write_text(p, "f0,f1,label\n0.5,1,0\n1,1,3\n");
  try {
    load_csv(p, 3);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  write_text(p, "f0,f1,label\n0.5,1,0\n0.1,abc,1\n");
  try {
    load_csv(p);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  write_text(p, "f0,f1,label\n0.5,1\n");
  CHECK_THROWS_AS(load_csv(p), ParseError);
  std::filesystem::remove(p);
  CHECK_THROWS(load_csv(temp_file("missing.csv")));
}

TEST_CASE("write_csv / load_csv round trip") {
  const auto ds = inject_symmetric(blobs(3, 40, 0.4, 2, 3), 0.3, 9);
  const auto p = temp_file("roundtrip.csv");
  write_csv(ds, p);
  const auto back = load_csv(p, 3);
  CHECK(back.features == ds.features);
  CHECK(back.observed_labels == ds.observed_labels);
  CHECK(back.clean_labels == ds.clean_labels);
  std::filesystem::remove(p);
}

TEST_CASE("inject_symmetric") {
  const auto base = blobs(4, 2500, 0.3, 1);
  CHECK(inject_symmetric(base, 0.0, 3) == base);
  const auto noisy = inject_symmetric(base, 0.4, 3);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < noisy.size(); ++i) flipped += noisy.observed_labels[i] != noisy.clean_labels[i];
  const double frac = static_cast<double>(flipped) / static_cast<double>(noisy.size());
  CHECK(frac >= 0.38);
  CHECK(frac <= 0.42);
  CHECK(noisy.features == base.features);
  CHECK(noisy.clean_labels == base.clean_labels);

  const auto two = inject_symmetric(blobs(2, 500, 0.3, 1), 0.4, 4);
  for (std::size_t i = 0; i < two.size(); ++i) {
    if (two.observed_labels[i] != two.clean_labels[i]) CHECK(two.observed_labels[i] == 1 - two.clean_labels[i]);
  }
}

TEST_CASE("inject_asymmetric") {
  const auto base = blobs(4, 2000, 0.3, 2);
  const auto cyc = cyclic_pair_map(4);
  CHECK(cyc == std::vector<int>{1, 2, 3, 0});
  CHECK(inject_asymmetric(base, 0.0, cyc, 1) == base);
  const std::vector<int> ident{0, 1, 2, 3};
  CHECK(inject_asymmetric(base, 0.7, ident, 1) == base);

  const auto noisy = inject_asymmetric(base, 0.4, cyc, 5);
  for (int c = 0; c < 4; ++c) {
    std::size_t total = 0, to_mapped = 0, elsewhere = 0;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      if (noisy.clean_labels[i] != c) continue;
      ++total;
      if (noisy.observed_labels[i] == cyc[static_cast<std::size_t>(c)]) ++to_mapped;
      else if (noisy.observed_labels[i] != c) ++elsewhere;
    }
    const double frac = static_cast<double>(to_mapped) / static_cast<double>(total);
    CHECK(frac >= 0.37);
    CHECK(frac <= 0.43);
    CHECK(elsewhere == 0);
  }
}

TEST_CASE("inject_openset") {
  const auto base = blobs(4, 250, 0.3, 3);
  const auto same = inject_openset(base, 0.0, {}, 1);
  CHECK(same == base);
  for (bool m : same.openset_mask) CHECK_FALSE(m);

  const auto noisy = inject_openset(base, 0.3, {}, 8);
  std::size_t masked = 0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (!noisy.openset_mask[i]) {
      CHECK(noisy.observed_labels[i] == base.observed_labels[i]);
      continue;
    }
    ++masked;
    CHECK_FALSE(noisy.is_clean(i));
    CHECK(noisy.clean_labels[i] == noisy.openset_sentinel());
    CHECK(noisy.observed_labels[i] >= 0);
    CHECK(noisy.observed_labels[i] < 4);
    const double r = std::hypot(noisy.features(i, 0), noisy.features(i, 1));
    CHECK(r > 1.0);
  }
  CHECK(masked >= 270);
  CHECK(masked <= 330);
  CHECK_NOTHROW(noisy.validate());
}

TEST_CASE("inject_noise dispatches on kind") {
  const auto base = blobs(3, 100, 0.3, 4);
  NoiseSpec s{NoiseKind::kSymmetric, 0.2, {}, {}};
  CHECK(inject_noise(base, s, 2) == inject_symmetric(base, 0.2, 2));
  s.kind = NoiseKind::kAsymmetric;
  CHECK(inject_noise(base, s, 2) == inject_asymmetric(base, 0.2, cyclic_pair_map(3), 2));
}

TEST_CASE("longtail sizes") {
  CHECK(longtail_sizes(1000, 4, 50.0) == std::vector<std::size_t>{1000, 271, 74, 20});
  CHECK(longtail_sizes(500, 2, 10.0) == std::vector<std::size_t>{500, 50});
  CHECK(longtail_sizes(300, 5, 1.0) == std::vector<std::size_t>(5, 300));
  CHECK(longtail_sizes(1124, 4, 10.0) == std::vector<std::size_t>{1124, 522, 242, 112});
}

TEST_CASE("apply_longtail") {
  const auto base = blobs(4, 1000, 0.3, 6);
  const auto lt = apply_longtail(base, {50.0}, 3);
  CHECK(lt.class_counts() == std::vector<std::size_t>{1000, 271, 74, 20});
  CHECK(apply_longtail(base, {1.0}, 3).class_counts() == std::vector<std::size_t>(4, 1000));

  const auto two = apply_longtail(blobs(2, 500, 0.3, 1), {10.0}, 2);
  CHECK(two.class_counts() == std::vector<std::size_t>{500, 50});

  CHECK(inject_symmetric(apply_longtail(base, {1.0}, 3), 0.0, 4) == base);

  // Class 2 starved below its quota.
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (base.observed_labels[i] != 2 || rows.size() % 50 == 0) rows.push_back(i);
  }
  Dataset starved = base.subset(rows);
  auto keep = starved.class_counts();
  CAPTURE(keep[2]);
  try {
    apply_longtail(starved, {2.0}, 1);
    FAIL("expected a sizing error");
  } catch (const SizingError& e) {
    CHECK(e.class_index() == 2);
  }
}

TEST_CASE("augment") {
  const Vec x{1.0, -2.0, 0.5};
  CHECK(augment(x, 0.2, 11) == augment(x, 0.2, 11));
  const auto tiny = augment(x, 1e-12, 11);
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(tiny[k] - x[k]) < 1e-10);

  Rng rng = make_rng(5, 1);
  const double s = 0.3;
  const int n = 10000;
  Vec mean(3, 0.0), sq(3, 0.0);
  for (int r = 0; r < n; ++r) {
    const auto v = augment(x, s, rng);
    for (std::size_t k = 0; k < 3; ++k) {
      mean[k] += (v[k] - x[k]) / n;
      sq[k] += (v[k] - x[k]) * (v[k] - x[k]) / n;
    }
  }
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(std::abs(mean[k]) < 3.0 * s / std::sqrt(static_cast<double>(n)));
    CHECK(std::sqrt(sq[k]) == Approx(s).epsilon(0.05));
  }
}

TEST_CASE("mixup") {
  Rng rng = make_rng(1, 2);
  const Vec xi{1.0, 2.0}, xj{-1.0, 0.0};
  const Vec yi{1.0, 0.0, 0.0}, yj{0.0, 0.0, 1.0};
  const auto one = mixup(xi, yi, xj, yj, 1.0, rng, 1.0);
  CHECK(one.x == xi);
  CHECK(one.y == yi);
  const auto half = mixup(xi, yi, xj, yj, 1.0, rng, 0.5);
  CHECK(half.y == Vec{0.5, 0.0, 0.5});
  CHECK(half.x == Vec{0.0, 1.0});

  double mean = 0.0;
  for (int r = 0; r < 10000; ++r) {
    const auto m = mixup(xi, yi, xj, yj, 1.0, rng);
    CHECK(m.beta >= 0.0);
    CHECK(m.beta <= 1.0);
    const double sum = std::accumulate(m.y.begin(), m.y.end(), 0.0);
    CHECK(std::abs(sum - 1.0) < 1e-9);
    mean += m.beta / 10000.0;
  }
  CHECK(std::abs(mean - 0.5) < 0.015);
}
