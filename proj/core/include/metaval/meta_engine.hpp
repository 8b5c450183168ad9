#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "metaval/data.hpp"
#include "metaval/nn.hpp"
#include "metaval/rng.hpp"

namespace metaval {

struct MetaBatch {
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_set;

  [[nodiscard]] std::size_t size() const noexcept { return train_indices.size(); }
};

enum class UpdateScope { kFull, kLastLayerWeights };
enum class MixupLabel { kResolved, kObserved };

struct MetaConfig {
  double lambda0 = 0.9;
  double eta_omega = 1.0;  // cancels under omega_normalize
  double p_mix = 5.0;
  double k_kl = 20.0;
  double mixup_alpha = 1.0;
  double augment_strength = 0.1;
  // Gate fires when raising lambda_i raises the validation loss. The flag inverts that test.
  bool flip_lambda_sign = false;
  UpdateScope probe_scope = UpdateScope::kLastLayerWeights;
  MixupLabel mixup_label = MixupLabel::kResolved;
};

// lam * y + (1 - lam) * p
Vec pseudo_label(std::span<const double> y, std::span<const double> p, double lam);
// y when lam_star > 0, else p
Vec resolve_label(std::span<const double> y, std::span<const double> p, double lam_star);

// Per-sample last-layer quantities of a batch evaluated at one parameter point.
struct BatchView {
  Matrix z;      // penultimate features
  Matrix probs;  // model outputs
  Matrix labels; // observed one-hot labels
};

BatchView view_batch(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows);

// One SGD step on (1/B) sum_i omega_i CE(pseudo_label(y_i, p_i, lambda_i), f(x_i)), targets held
// fixed at the current predictions. The input model is not modified.
MlpModel virtual_step(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows,
                      std::span<const double> omega, std::span<const double> lambdas, double eta,
                      UpdateScope scope = UpdateScope::kFull);

// eta_omega / |V| * sum_j iota(i, j), before clipping. Equals -(B eta_omega / eta_theta) times the
// derivative of the mean validation loss w.r.t. omega_i through a last-layer virtual step.
std::vector<double> omega_alignment(const BatchView& train, const BatchView& val, double lambda0,
                                    double eta_omega);
// max(0, omega_alignment); training gradients use target pseudo_label(lambda0),
// validation gradients (from the probe model) use the validation labels.
std::vector<double> omega_update(const BatchView& train, const BatchView& val, double lambda0,
                                 double eta_omega);
std::vector<double> omega_normalize(std::span<const double> omega);

// d_i = d(mean validation loss)/d lambda_i through one last-layer virtual step.
std::vector<double> lambda_gradient(const BatchView& train, const BatchView& val,
                                    std::span<const double> probe_omega, double eta_theta);
// [sign(d_i)]_+ ; sign(0) contributes 0.
std::vector<double> lambda_update(std::span<const double> lambda_grad, bool flip_sign = false);

// Frozen per-sample inputs of the composite loss: every target and random draw is fixed
// before differentiation, so the loss is a deterministic function of the parameters.
struct LossInputs {
  Vec pseudo;    // pseudo_label(y, p, lambda0)
  Vec resolved;  // resolve_label(y, p, lambda_star)
  Vec mix_x;
  Vec mix_y;
  Vec augmented_x;
};

std::vector<LossInputs> prepare_loss_inputs(const MlpModel& model, const Dataset& ds,
                                            const MetaBatch& batch, std::span<const double> lambda_star,
                                            const MetaConfig& cfg, Rng& rng);

struct LossTerms {
  double weighted = 0.0;
  double resolved = 0.0;
  double mixup = 0.0;
  double consistency = 0.0;
  double total = 0.0;
};

struct LossEvaluation {
  LossTerms terms;
  GradientBundle grad;
};

// Batch mean of omega_i CE(pseudo) + CE(resolved)/B + p CE(mix_y, f(mix_x)) + k KL(f(x), f(x_aug)).
LossEvaluation training_loss(const MlpModel& model, const Dataset& ds, const MetaBatch& batch,
                             std::span<const double> omega_star, std::span<const LossInputs> inputs,
                             double p_mix, double k_kl);

double mean_ce(const MlpModel& model, const Dataset& ds, std::span<const std::size_t> rows);

struct MetaStepReport {
  std::vector<double> omega;        // normalised
  std::vector<double> raw_omega;    // before normalisation
  std::vector<double> lambda_star;  // 0 or 1
  LossTerms train_loss;
  double val_loss = 0.0;
  double virtual_val_loss = 0.0;
  double lr = 0.0;
};

struct MetaStepResult {
  MlpModel model;
  MetaStepReport report;
};

// Probe step (unit omega, lambda0) -> omega* -> lambda* -> real SGD step at lr_at(t).
MetaStepResult meta_train_step(const MlpModel& model, const Dataset& ds, const MetaBatch& batch,
                               const LrSchedule& schedule, std::int64_t t, const MetaConfig& cfg,
                               Rng& rng);

}  // namespace metaval
