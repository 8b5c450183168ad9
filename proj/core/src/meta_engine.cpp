#include "metaval/meta_engine.hpp"

#include <algorithm>
#include <cmath>

#include "metaval/errors.hpp"

namespace metaval {

Vec pseudo_label(std::span<const double> y, std::span<const double> p, double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw InputError("lambda must lie in [0, 1]");
  Vec out(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) out[k] = lam * y[k] + (1.0 - lam) * p[k];
  return out;
}

Vec resolve_label(std::span<const double> y, std::span<const double> p, double lam_star) {
  return lam_star > 0.0 ? Vec(y.begin(), y.end()) : Vec(p.begin(), p.end());
}

BatchView view_batch(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows) {
  BatchView v{Matrix(rows.size(), model.feature_dim()), Matrix(rows.size(), model.num_classes()),
              Matrix(rows.size(), model.num_classes())};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto tr = forward(model, ds.features.row(rows[r]));
    std::copy(tr.penultimate().begin(), tr.penultimate().end(), v.z.row(r).begin());
    std::copy(tr.probs.begin(), tr.probs.end(), v.probs.row(r).begin());
    v.labels(r, static_cast<std::size_t>(ds.observed_labels[rows[r]])) = 1.0;
  }
  return v;
}

MlpModel virtual_step(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows,
                      std::span<const double> omega, std::span<const double> lambdas, double eta,
                      UpdateScope scope) {
  if (omega.size() != rows.size() || lambdas.size() != rows.size()) {
    throw InputError("virtual step needs one omega and one lambda per batch sample");
  }
  if (rows.empty()) return model;
  GradientBundle acc = GradientBundle::zeros_like(model);
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (omega[r] == 0.0) continue;
    const auto tr = forward(model, ds.features.row(rows[r]));
    const Vec target = pseudo_label(ds.observed_one_hot(rows[r]), tr.probs, lambdas[r]);
    acc.accumulate(backward(model, tr, target), omega[r] * inv_b);
  }
  if (scope == UpdateScope::kLastLayerWeights) {
    MlpModel next = model;
    auto w = next.weights.back().flat();
    auto g = acc.weight_grads.back().flat();
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= eta * g[k];
    return next;
  }
  return sgd_step(model, acc, eta);
}

std::vector<double> omega_alignment(const BatchView& train, const BatchView& val, double lambda0,
                                    double eta_omega) {
  const std::size_t nv = val.z.rows();
  if (nv == 0) throw ConfigError("validation set is empty");
  const std::size_t B = train.z.rows();
  const std::size_t C = train.probs.cols();
  std::vector<double> out(B, 0.0);
  Vec g_i(C);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < C; ++k) g_i[k] = lambda0 * (train.probs(i, k) - train.labels(i, k));
    double s = 0.0;
    for (std::size_t j = 0; j < nv; ++j) {
      double gg = 0.0;
      for (std::size_t k = 0; k < C; ++k) gg += (val.probs(j, k) - val.labels(j, k)) * g_i[k];
      s += dot(val.z.row(j), train.z.row(i)) * gg;
    }
    out[i] = eta_omega / static_cast<double>(nv) * s;
  }
  return out;
}

std::vector<double> omega_update(const BatchView& train, const BatchView& val, double lambda0,
                                 double eta_omega) {
  auto out = omega_alignment(train, val, lambda0, eta_omega);
  for (double& w : out) w = std::max(0.0, w);
  return out;
}

std::vector<double> omega_normalize(std::span<const double> omega) {
  double s = 0.0;
  for (double w : omega) {
    if (w < 0.0) throw InputError("omega entries must be nonnegative");
    s += w;
  }
  std::vector<double> out(omega.size(), 0.0);
  if (s > 0.0) {
    for (std::size_t i = 0; i < omega.size(); ++i) out[i] = omega[i] / s;
  }
  return out;
}

std::vector<double> lambda_gradient(const BatchView& train, const BatchView& val,
                                    std::span<const double> probe_omega, double eta_theta) {
  const std::size_t nv = val.z.rows();
  if (nv == 0) throw ConfigError("validation set is empty");
  const std::size_t B = train.z.rows();
  const std::size_t C = train.probs.cols();
  std::vector<double> d(B, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < nv; ++j) {
      double gg = 0.0;
      for (std::size_t k = 0; k < C; ++k) {
        gg += (val.probs(j, k) - val.labels(j, k)) * (train.probs(i, k) - train.labels(i, k));
      }
      s += dot(val.z.row(j), train.z.row(i)) * gg;
    }
    d[i] = -eta_theta * probe_omega[i] / (static_cast<double>(B) * static_cast<double>(nv)) * s;
  }
  return d;
}

std::vector<double> lambda_update(std::span<const double> lambda_grad, bool flip_sign) {
  std::vector<double> out(lambda_grad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = flip_sign ? -lambda_grad[i] : lambda_grad[i];
    out[i] = d > 0.0 ? 1.0 : 0.0;
  }
  return out;
}

std::vector<LossInputs> prepare_loss_inputs(const MlpModel& model, const Dataset& ds,
                                            const MetaBatch& batch, std::span<const double> lambda_star,
                                            const MetaConfig& cfg, Rng& rng) {
  if (batch.val_set.empty()) throw ConfigError("validation set is empty");
  std::uniform_int_distribution<std::size_t> partner(0, batch.val_set.size() - 1);
  std::vector<LossInputs> out;
  out.reserve(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const std::size_t i = batch.train_indices[r];
    const auto x = ds.features.row(i);
    const Vec p = forward(model, x).probs;
    const Vec y = ds.observed_one_hot(i);
    LossInputs in;
    in.pseudo = pseudo_label(y, p, cfg.lambda0);
    in.resolved = resolve_label(y, p, lambda_star[r]);
    const std::size_t j = batch.val_set[partner(rng)];
    const Vec yj = ds.observed_one_hot(j);
    const Vec& label_i = cfg.mixup_label == MixupLabel::kResolved ? in.resolved : y;
    auto m = mixup(x, label_i, ds.features.row(j), yj, cfg.mixup_alpha, rng);
    in.mix_x = std::move(m.x);
    in.mix_y = std::move(m.y);
    in.augmented_x = augment(x, cfg.augment_strength, rng);
    out.push_back(std::move(in));
  }
  return out;
}

LossEvaluation training_loss(const MlpModel& model, const Dataset& ds, const MetaBatch& batch,
                             std::span<const double> omega_star, std::span<const LossInputs> inputs,
                             double p_mix, double k_kl) {
  if (p_mix < 0.0 || k_kl < 0.0) throw InputError("loss weights must be nonnegative");
  const std::size_t B = batch.size();
  if (omega_star.size() != B || inputs.size() != B) throw InputError("loss inputs do not match batch");
  LossEvaluation ev{{}, GradientBundle::zeros_like(model)};
  if (B == 0) return ev;
  const double inv_b = 1.0 / static_cast<double>(B);
  const std::size_t C = model.num_classes();
  Vec dlogits(C);

  for (std::size_t r = 0; r < B; ++r) {
    const auto& in = inputs[r];
    const auto tr = forward(model, ds.features.row(batch.train_indices[r]));
    const double ce_pseudo = cross_entropy(in.pseudo, tr.probs);
    const double ce_resolved = cross_entropy(in.resolved, tr.probs);
    ev.terms.weighted += inv_b * omega_star[r] * ce_pseudo;
    ev.terms.resolved += inv_b * inv_b * ce_resolved;
    // d/dlogits of omega*CE(a, f) + CE(b, f)/B with fixed targets a, b on the simplex.
    for (std::size_t k = 0; k < C; ++k) {
      dlogits[k] = omega_star[r] * (tr.probs[k] - in.pseudo[k]) + inv_b * (tr.probs[k] - in.resolved[k]);
    }

    if (k_kl > 0.0) {
      const auto tr_aug = forward(model, in.augmented_x);
      ev.terms.consistency += inv_b * k_kl * kl_divergence(tr.probs, tr_aug.probs);
      // KL(p, q), p = softmax(a), q = softmax(b): dKL/da = p * (v - <p, v>), v = log p - log q;
      // dKL/db = q - p.
      Vec v(C);
      double pv = 0.0;
      for (std::size_t k = 0; k < C; ++k) {
        v[k] = tr.probs[k] > 0.0
                   ? std::log(tr.probs[k]) - std::log(std::max(tr_aug.probs[k], kLogClamp))
                   : 0.0;
        pv += tr.probs[k] * v[k];
      }
      Vec daug(C);
      for (std::size_t k = 0; k < C; ++k) {
        dlogits[k] += k_kl * tr.probs[k] * (v[k] - pv);
        daug[k] = k_kl * (tr_aug.probs[k] - tr.probs[k]);
      }
      ev.grad.accumulate(backward_from_logits(model, tr_aug, daug), inv_b);
    }
    if (p_mix > 0.0) {
      const auto tr_mix = forward(model, in.mix_x);
      ev.terms.mixup += inv_b * p_mix * cross_entropy(in.mix_y, tr_mix.probs);
      Vec dmix(C);
      for (std::size_t k = 0; k < C; ++k) dmix[k] = p_mix * (tr_mix.probs[k] - in.mix_y[k]);
      ev.grad.accumulate(backward_from_logits(model, tr_mix, dmix), inv_b);
    }
    ev.grad.accumulate(backward_from_logits(model, tr, dlogits), inv_b);
  }
  ev.terms.total = ev.terms.weighted + ev.terms.resolved + ev.terms.mixup + ev.terms.consistency;
  return ev;
}

double mean_ce(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (auto i : rows) s += cross_entropy(ds.observed_one_hot(i), forward(model, ds.features.row(i)).probs);
  return s / static_cast<double>(rows.size());
}

MetaStepResult meta_train_step(const MlpModel& model, const Dataset& ds, const MetaBatch& batch,
                               const LrSchedule& schedule, std::int64_t t, const MetaConfig& cfg,
                               Rng& rng) {
  if (batch.train_indices.empty()) throw ConfigError("training batch is empty");
  if (batch.val_set.empty()) throw ConfigError("validation set is empty");
  const std::size_t B = batch.size();
  const double lr = schedule.lr_at(t);

  const std::vector<double> unit(B, 1.0);
  const std::vector<double> lam0(B, cfg.lambda0);
  const MlpModel probe = virtual_step(model, ds, batch.train_indices, unit, lam0, lr, cfg.probe_scope);

  const BatchView train = view_batch(model, ds, batch.train_indices);
  const BatchView val = view_batch(probe, ds, batch.val_set);

  MetaStepReport rep;
  rep.lr = lr;
  rep.raw_omega = omega_update(train, val, cfg.lambda0, cfg.eta_omega);
  rep.omega = omega_normalize(rep.raw_omega);
  rep.lambda_star = lambda_update(lambda_gradient(train, val, unit, lr), cfg.flip_lambda_sign);
  rep.val_loss = mean_ce(model, ds, batch.val_set);
  rep.virtual_val_loss = mean_ce(probe, ds, batch.val_set);

  const auto inputs = prepare_loss_inputs(model, ds, batch, rep.lambda_star, cfg, rng);
  auto ev = training_loss(model, ds, batch, rep.omega, inputs, cfg.p_mix, cfg.k_kl);
  rep.train_loss = ev.terms;
  return {sgd_step(model, ev.grad, lr), std::move(rep)};
}

}  // namespace metaval
