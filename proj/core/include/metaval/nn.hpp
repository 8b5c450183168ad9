#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "metaval/linalg.hpp"
#include "metaval/rng.hpp"

namespace metaval {

inline constexpr double kLogClamp = 1e-12;

// Feed-forward classifier: rectifier hidden layers, linear last layer, softmax output.
// weights[l] maps layer_dims[l] -> layer_dims[l+1] and is stored out x in.
struct MlpModel {
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;
  std::vector<Vec> biases;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static MlpModel init(std::vector<std::size_t> dims, std::uint64_t seed);
  // All parameters zero; mostly for tests.
  static MlpModel zeros(std::vector<std::size_t> dims);

  [[nodiscard]] std::size_t num_layers() const noexcept { return weights.size(); }
  [[nodiscard]] std::size_t input_dim() const noexcept { return layer_dims.front(); }
  [[nodiscard]] std::size_t num_classes() const noexcept { return layer_dims.back(); }
  [[nodiscard]] std::size_t feature_dim() const noexcept { return layer_dims[layer_dims.size() - 2]; }
  [[nodiscard]] std::size_t param_count() const noexcept;
  [[nodiscard]] bool all_finite() const noexcept;

  // Flat parameter view in layer order (W0, b0, W1, b1, ...). Used by gradient checks.
  [[nodiscard]] std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> p);

  bool operator==(const MlpModel&) const = default;
};

struct ForwardTrace {
  // inputs[l] is the input to layer l (inputs[0] = x); size == num_layers.
  std::vector<Vec> inputs;
  Vec logits;
  Vec probs;

  // z_{L-1}: the feature consumed by the last (linear) layer.
  [[nodiscard]] const Vec& penultimate() const { return inputs.back(); }
};

struct GradientBundle {
  std::vector<Matrix> weight_grads;
  std::vector<Vec> bias_grads;
  // signals[l] = d loss / d pre-activation of layer l; signals.back() is the logit gradient.
  std::vector<Vec> signals;

  [[nodiscard]] const Vec& logit_grad() const { return signals.back(); }

  static GradientBundle zeros_like(const MlpModel& model);
  // this += scale * other
  void accumulate(const GradientBundle& other, double scale);
  [[nodiscard]] std::vector<double> flat() const;
};

Vec softmax(std::span<const double> logits);

// Throws InputError when x.size() != model.input_dim().
ForwardTrace forward(const MlpModel& model, std::span<const double> x);
std::vector<ForwardTrace> forward_batch(const MlpModel& model, const Matrix& xs);

// -sum_k target(k) log max(pred(k), 1e-12)
double cross_entropy(std::span<const double> target, std::span<const double> pred);
// sum_k p(k) log(p(k) / max(q(k), 1e-12)); terms with p(k) == 0 contribute 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Gradients of cross_entropy(target, probs) for the sample in `trace`.
GradientBundle backward(const MlpModel& model, const ForwardTrace& trace,
                        std::span<const double> target);
// Back-propagates an arbitrary logit gradient through the network.
GradientBundle backward_from_logits(const MlpModel& model, const ForwardTrace& trace,
                                    std::span<const double> logit_grad);

// Returns a new model with params - eta * grads; `model` is not touched.
MlpModel sgd_step(const MlpModel& model, const GradientBundle& grads, double eta);

struct LastLayerView {
  Vec z;  // penultimate feature
  Vec g;  // probs - target
};
LastLayerView extract_last_layer(const ForwardTrace& trace, std::span<const double> target);

// Cosine annealing with warm restarts. The last iteration of each cycle sits exactly at
// eta_min and is reported by is_cycle_end().
struct LrSchedule {
  double eta_max = 0.1;
  double eta_min = 0.0;
  std::int64_t cycle_len = 100;  // T_0, must be >= 2
  double cycle_mult = 1.0;

  void validate() const;
  [[nodiscard]] double lr_at(std::int64_t t) const;
  [[nodiscard]] bool is_cycle_end(std::int64_t t) const;

  struct Position {
    std::int64_t t_cur;
    std::int64_t t_len;
  };
  [[nodiscard]] Position position(std::int64_t t) const;
};

}  // namespace metaval
