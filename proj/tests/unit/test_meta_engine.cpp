#include <cmath>
#include <numeric>

#include "doctest.h"
#include "metaval/clean_detect.hpp"
#include "metaval/errors.hpp"
#include "metaval/meta_engine.hpp"
#include "metaval/oracles.hpp"

using namespace metaval;
using doctest::Approx;

namespace {

Dataset blobs(int C, std::size_t n, double spread, std::uint64_t seed) {
  return gen_synthetic({SyntheticKind::kGaussianBlobs, C, n, 2, spread}, seed);
}

MetaBatch make_batch(std::size_t first, std::size_t b, std::size_t val_first, std::size_t v) {
  MetaBatch mb;
  for (std::size_t i = 0; i < b; ++i) mb.train_indices.push_back(first + i);
  for (std::size_t j = 0; j < v; ++j) mb.val_set.push_back(val_first + j);
  return mb;
}

bool on_simplex(const Vec& v, double tol = 1e-9) {
  double s = 0.0;
  for (double x : v) {
    if (x < -tol) return false;
    s += x;
  }
  return std::abs(s - 1.0) <= tol;
}

}  // namespace

TEST_CASE("pseudo_label") {
  const Vec y{1, 0}, p{0.6, 0.4};
  CHECK(pseudo_label(y, p, 1.0) == y);
  CHECK(pseudo_label(y, p, 0.0) == p);
  const auto q = pseudo_label(y, p, 0.9);
  CHECK(q[0] == Approx(0.96));
  CHECK(q[1] == Approx(0.04));
  CHECK(on_simplex(q));
  CHECK_THROWS_AS(pseudo_label(y, p, 1.5), InputError);
}

TEST_CASE("resolve_label") {
  const Vec y{0, 1, 0}, p{0.2, 0.3, 0.5};
  CHECK(resolve_label(y, p, 1.0) == y);
  CHECK(resolve_label(y, p, 0.0) == p);
  CHECK(resolve_label(y, y, 0.0) == y);
  CHECK(resolve_label(y, y, 1.0) == y);
}

TEST_CASE("omega_normalize") {
  const auto a = omega_normalize(Vec{2, 2, 0, 0});
  CHECK(a == Vec{0.5, 0.5, 0, 0});
  CHECK(omega_normalize(Vec{0, 0, 0}) == Vec{0, 0, 0});
  Rng rng = make_rng(4, 0);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  Vec w(37);
  for (auto& x : w) x = u(rng);
  const auto n = omega_normalize(w);
  CHECK(std::abs(std::accumulate(n.begin(), n.end(), 0.0) - 1.0) < 1e-12);
  CHECK_THROWS_AS(omega_normalize(Vec{1, -1}), InputError);
}

TEST_CASE("omega_update: orthogonal features and clipping") {
  BatchView train{Matrix(2, 2), Matrix(2, 2), Matrix(2, 2)};
  BatchView val{Matrix(1, 2), Matrix(1, 2), Matrix(1, 2)};
  train.z(0, 0) = 1.0;  // orthogonal to the validation feature
  train.z(1, 1) = 1.0;  // aligned
  val.z(0, 1) = 1.0;
  train.probs(0, 0) = train.probs(0, 1) = 0.5;
  train.probs(1, 0) = 0.8;
  train.probs(1, 1) = 0.2;
  train.labels(0, 0) = 1.0;
  train.labels(1, 1) = 1.0;  // gradient points away from class 1
  val.probs(0, 0) = 0.3;
  val.probs(0, 1) = 0.7;
  val.labels(0, 0) = 1.0;
  const auto raw = omega_alignment(train, val, 0.9, 1.0);
  CHECK(raw[0] == 0.0);
  // g_j . g_i = (-0.7, 0.7) . 0.9 (0.8, -0.8) < 0 -> clipped.
  CHECK(raw[1] < 0.0);
  const auto w = omega_update(train, val, 0.9, 1.0);
  CHECK(w == Vec{0.0, 0.0});
  BatchView empty{Matrix(0, 2), Matrix(0, 2), Matrix(0, 2)};
  CHECK_THROWS_AS(omega_update(train, empty, 0.9, 1.0), ConfigError);
  CHECK_THROWS_AS(lambda_gradient(train, empty, Vec{1, 1}, 0.1), ConfigError);
}

TEST_CASE("omega ranking is invariant to positive validation-gradient scaling") {
  const auto ds = inject_symmetric(blobs(3, 30, 0.5, 2), 0.3, 1);
  const auto m = MlpModel::init({2, 6, 3}, 3);
  std::vector<std::size_t> tr(20), va(10);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), 50);
  const auto train = view_batch(m, ds, tr);
  const auto val = view_batch(m, ds, va);
  const auto a = omega_alignment(train, val, 0.9, 1.0);
  const auto b = omega_alignment(train, val, 0.9, 2.5);
  std::vector<std::size_t> ia(a.size()), ib(b.size());
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), 0);
  std::stable_sort(ia.begin(), ia.end(), [&](auto x, auto y) { return a[x] < a[y]; });
  std::stable_sort(ib.begin(), ib.end(), [&](auto x, auto y) { return b[x] < b[y]; });
  CHECK(ia == ib);
}

TEST_CASE("lambda_update") {
  CHECK(lambda_update(Vec{0.5, -0.5, 0.0}) == Vec{1, 0, 0});
  CHECK(lambda_update(Vec{0.5, -0.5, 0.0}, true) == Vec{0, 1, 0});
  // Orthogonal features give d = 0 and the gate stays closed.
  BatchView train{Matrix(1, 2), Matrix(1, 2), Matrix(1, 2)};
  BatchView val{Matrix(1, 2), Matrix(1, 2), Matrix(1, 2)};
  train.z(0, 0) = 1.0;
  val.z(0, 1) = 1.0;
  train.probs(0, 0) = 0.5;
  train.probs(0, 1) = 0.5;
  train.labels(0, 1) = 1.0;
  val.probs(0, 0) = 1.0;
  val.labels(0, 1) = 1.0;
  const auto d = lambda_gradient(train, val, Vec{1.0}, 0.1);
  CHECK(d[0] == 0.0);
  CHECK(lambda_update(d) == Vec{0.0});
}

TEST_CASE("analytic meta gradients match finite differences on a 2-8-3 network") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto ds = inject_symmetric(blobs(3, 20, 0.6, s), 0.3, s + 1);
    const auto m = MlpModel::init({2, 8, 3}, s + 7);
    std::vector<std::size_t> tr(8), va(6);
    std::iota(tr.begin(), tr.end(), 0);
    std::iota(va.begin(), va.end(), 30);
    for (double probe : {0.0, 1.0}) {
      const Vec omega(tr.size(), probe);
      const auto chk = oracle::check_meta_gradient(m, ds, tr, va, omega, 0.9, 1e-3);
      CHECK(chk.max_omega_rel_error < 1e-3);
      CHECK(chk.lambda_sign_mismatches == 0);
    }
  }
}

TEST_CASE("virtual_step: trivial cases and purity") {
  const auto ds = blobs(3, 10, 0.4, 1);
  const auto m = MlpModel::init({2, 5, 3}, 2);
  const std::vector<std::size_t> rows{0, 4, 11, 25};
  const Vec lam(4, 0.9);
  CHECK(virtual_step(m, ds, rows, Vec(4, 0.0), lam, 0.5) == m);
  CHECK(virtual_step(m, ds, rows, Vec(4, 1.0), lam, 0.0) == m);
  const auto saved = m;
  const auto moved = virtual_step(m, ds, rows, Vec(4, 1.0), lam, 0.5);
  CHECK(m == saved);
  CHECK_FALSE(moved == m);
  const auto last = virtual_step(m, ds, rows, Vec(4, 1.0), lam, 0.5, UpdateScope::kLastLayerWeights);
  CHECK(last.weights.front() == m.weights.front());
  CHECK(last.biases == m.biases);
  CHECK_FALSE(last.weights.back() == m.weights.back());
}

TEST_CASE("virtual_step: single-sample hand computation") {
  const auto ds = blobs(3, 5, 0.4, 3);
  const auto m = MlpModel::init({2, 4, 3}, 5);
  const std::size_t row = 7;
  const double eta = 0.3, omega = 0.7, lam = 0.9;
  const auto tr = forward(m, ds.features.row(row));
  const auto y = ds.observed_one_hot(row);
  Vec g(3);
  for (std::size_t k = 0; k < 3; ++k) g[k] = omega * (tr.probs[k] - (lam * y[k] + (1 - lam) * tr.probs[k]));
  const auto next = virtual_step(m, ds, std::vector<std::size_t>{row}, Vec{omega}, Vec{lam}, eta);
  const auto& z = tr.penultimate();
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(std::abs(next.biases.back()[r] - (m.biases.back()[r] - eta * g[r])) < 1e-10);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(std::abs(next.weights.back()(r, c) - (m.weights.back()(r, c) - eta * g[r] * z[c])) < 1e-10);
    }
  }
}

TEST_CASE("training_loss: term isolation") {
  const auto ds = inject_symmetric(blobs(3, 20, 0.4, 4), 0.3, 2);
  const auto m = MlpModel::init({2, 6, 3}, 1);
  const auto batch = make_batch(0, 10, 40, 5);
  Rng rng = make_rng(1, 0);
  const Vec lam{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  const auto inputs = prepare_loss_inputs(m, ds, batch, lam, MetaConfig{}, rng);
  const auto ev = training_loss(m, ds, batch, Vec(10, 0.0), inputs, 0.0, 0.0);
  double want = 0.0;
  for (std::size_t r = 0; r < 10; ++r) {
    want += cross_entropy(inputs[r].resolved, forward(m, ds.features.row(r)).probs) / 10.0;
  }
  want /= 10.0;
  CHECK(ev.terms.total == Approx(want).epsilon(1e-12));
  CHECK(ev.terms.weighted == 0.0);
  CHECK(ev.terms.mixup == 0.0);
  CHECK(ev.terms.consistency == 0.0);
  CHECK(ev.terms.resolved == ev.terms.total);
  for (std::size_t r = 0; r < 10; ++r) {
    const auto p = forward(m, ds.features.row(r)).probs;
    CHECK(inputs[r].resolved == (lam[r] > 0 ? ds.observed_one_hot(r) : p));
    CHECK(on_simplex(inputs[r].pseudo));
    CHECK(on_simplex(inputs[r].mix_y));
  }
}

TEST_CASE("training_loss: coincident targets give zero loss") {
  Dataset ds = blobs(2, 4, 0.3, 1);
  for (auto& y : ds.observed_labels) y = 0;
  auto m = MlpModel::zeros({2, 3, 2});
  m.biases.back()[0] = 2000.0;  // exp(-2000) underflows: output is exactly one-hot
  const auto batch = make_batch(0, 4, 4, 4);
  Rng rng = make_rng(2, 0);
  const auto inputs = prepare_loss_inputs(m, ds, batch, Vec{1, 0, 1, 0}, MetaConfig{}, rng);
  const auto ev = training_loss(m, ds, batch, Vec{0.25, 0.25, 0.25, 0.25}, inputs, 5.0, 20.0);
  CHECK(ev.terms.total == 0.0);
}

TEST_CASE("training_loss: gradient matches central differences") {
  const auto ds = inject_symmetric(blobs(3, 15, 0.5, 9), 0.3, 4);
  const auto m = MlpModel::init({2, 5, 3}, 12);
  const auto batch = make_batch(0, 6, 30, 4);
  Rng rng = make_rng(5, 0);
  const Vec lam{1, 0, 0, 1, 1, 0};
  const auto inputs = prepare_loss_inputs(m, ds, batch, lam, MetaConfig{}, rng);
  const Vec omega{0.1, 0.3, 0.0, 0.2, 0.25, 0.15};
  const auto ev = training_loss(m, ds, batch, omega, inputs, 5.0, 20.0);
  const auto g = ev.grad.flat();
  auto p = m.flat_params();
  double worst = 0.0;
  MlpModel probe = m;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double keep = p[k];
    p[k] = keep + 1e-5;
    probe.set_flat_params(p);
    const double up = training_loss(probe, ds, batch, omega, inputs, 5.0, 20.0).terms.total;
    p[k] = keep - 1e-5;
    probe.set_flat_params(p);
    const double dn = training_loss(probe, ds, batch, omega, inputs, 5.0, 20.0).terms.total;
    p[k] = keep;
    worst = std::max(worst, oracle::relative_error(g[k], (up - dn) / 2e-5, 1e-6));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("meta_train_step: zero learning rate leaves the model unchanged") {
  const auto ds = inject_symmetric(blobs(3, 20, 0.4, 5), 0.3, 3);
  const auto m = MlpModel::init({2, 6, 3}, 4);
  const LrSchedule sched{0.1, 0.0, 10, 1.0};
  Rng rng = make_rng(0, 0);
  const auto res = meta_train_step(m, ds, make_batch(0, 8, 40, 6), sched, 9, MetaConfig{}, rng);
  CHECK(res.report.lr == 0.0);
  CHECK(res.model == m);
  CHECK(res.report.omega.size() == 8);
  CHECK(res.report.lambda_star.size() == 8);
  CHECK(std::isfinite(res.report.val_loss));
  CHECK(res.report.train_loss.total > 0.0);
}

TEST_CASE("meta_train_step: deterministic with range invariants") {
  const auto ds = inject_symmetric(blobs(3, 30, 0.4, 6), 0.4, 5);
  const LrSchedule sched{0.1, 0.001, 20, 1.0};
  MetaConfig cfg;
  auto run = [&] {
    MlpModel m = MlpModel::init({2, 8, 3}, 8);
    Rng rng = make_rng(3, 1);
    std::vector<MetaStepReport> reps;
    for (std::int64_t t = 0; t < 25; ++t) {
      auto res = meta_train_step(m, ds, make_batch((t * 7) % 60, 10, 70, 8), sched, t, cfg, rng);
      m = std::move(res.model);
      reps.push_back(std::move(res.report));
    }
    return std::make_pair(m, reps);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.first.all_finite());
  for (std::size_t k = 0; k < a.second.size(); ++k) {
    const auto& ra = a.second[k];
    const auto& rb = b.second[k];
    CHECK(ra.omega == rb.omega);
    CHECK(ra.lambda_star == rb.lambda_star);
    CHECK(ra.train_loss.total == rb.train_loss.total);
    double s = 0.0;
    for (double w : ra.omega) {
      CHECK(w >= 0.0);
      s += w;
    }
    CHECK((s == 0.0 || std::abs(s - 1.0) < 1e-12));
    for (double l : ra.lambda_star) CHECK((l == 0.0 || l == 1.0));
  }
}

TEST_CASE("omega favours clean over flipped samples under a warm probe") {
  const auto noisy = inject_symmetric(blobs(3, 200, 0.3, 11), 0.4, 6);
  WarmupConfig wc;
  wc.seed = 2;
  const auto m = warmup_train(MlpModel::init({2, 16, 3}, 4), noisy, wc);
  Rng rng = make_rng(9, 0);
  std::vector<std::size_t> rows(noisy.size());
  std::iota(rows.begin(), rows.end(), 0);
  double clean_sum = 0.0, noisy_sum = 0.0;
  std::size_t nc = 0, nn = 0;
  for (int b = 0; b < 20; ++b) {
    std::shuffle(rows.begin(), rows.end(), rng);
    MetaBatch mb;
    mb.train_indices.assign(rows.begin(), rows.begin() + 32);
    for (std::size_t i = 32; mb.val_set.size() < 15 && i < rows.size(); ++i) {
      if (noisy.is_clean(rows[i])) mb.val_set.push_back(rows[i]);
    }
    const auto train = view_batch(m, noisy, mb.train_indices);
    const auto val = view_batch(m, noisy, mb.val_set);
    const auto w = omega_normalize(omega_update(train, val, 0.9, 1.0));
    for (std::size_t r = 0; r < w.size(); ++r) {
      if (noisy.is_clean(mb.train_indices[r])) {
        clean_sum += w[r];
        ++nc;
      } else {
        noisy_sum += w[r];
        ++nn;
      }
    }
  }
  CHECK(clean_sum / nc > noisy_sum / nn);
}
