#include "metaval/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "metaval/errors.hpp"

namespace metaval {

namespace {

void check_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw InputError("layer_dims needs at least input and output sizes");
  for (auto d : dims) {
    if (d == 0) throw InputError("layer_dims entries must be positive");
  }
}

}  // namespace

MlpModel MlpModel::zeros(std::vector<std::size_t> dims) {
  check_dims(dims);
  MlpModel m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    m.weights.emplace_back(dims[l + 1], dims[l], 0.0);
    m.biases.emplace_back(dims[l + 1], 0.0);
  }
  m.layer_dims = std::move(dims);
  return m;
}

MlpModel MlpModel::init(std::vector<std::size_t> dims, std::uint64_t seed) {
  MlpModel m = zeros(std::move(dims));
  Rng rng = make_rng(seed, 0x4e4e);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.layer_dims[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : m.weights[l].flat()) w = u(rng);
    for (double& b : m.biases[l]) b = u(rng);
  }
  return m;
}

std::size_t MlpModel::param_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

bool MlpModel::all_finite() const noexcept {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (double w : weights[l].flat()) {
      if (!std::isfinite(w)) return false;
    }
    for (double b : biases[l]) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

std::vector<double> MlpModel::flat_params() const {
  std::vector<double> p;
  p.reserve(param_count());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    p.insert(p.end(), weights[l].flat().begin(), weights[l].flat().end());
    p.insert(p.end(), biases[l].begin(), biases[l].end());
  }
  return p;
}

void MlpModel::set_flat_params(std::span<const double> p) {
  if (p.size() != param_count()) throw InputError("flat parameter vector has wrong length");
  std::size_t k = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (double& w : weights[l].flat()) w = p[k++];
    for (double& b : biases[l]) b = p[k++];
  }
}

GradientBundle GradientBundle::zeros_like(const MlpModel& model) {
  GradientBundle g;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    g.weight_grads.emplace_back(model.weights[l].rows(), model.weights[l].cols(), 0.0);
    g.bias_grads.emplace_back(model.biases[l].size(), 0.0);
    g.signals.emplace_back(model.biases[l].size(), 0.0);
  }
  return g;
}

void GradientBundle::accumulate(const GradientBundle& other, double scale) {
  for (std::size_t l = 0; l < weight_grads.size(); ++l) {
    auto dst = weight_grads[l].flat();
    auto src = other.weight_grads[l].flat();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
    for (std::size_t k = 0; k < bias_grads[l].size(); ++k) {
      bias_grads[l][k] += scale * other.bias_grads[l][k];
    }
    for (std::size_t k = 0; k < signals[l].size(); ++k) signals[l][k] += scale * other.signals[l][k];
  }
}

std::vector<double> GradientBundle::flat() const {
  std::vector<double> p;
  for (std::size_t l = 0; l < weight_grads.size(); ++l) {
    p.insert(p.end(), weight_grads[l].flat().begin(), weight_grads[l].flat().end());
    p.insert(p.end(), bias_grads[l].begin(), bias_grads[l].end());
  }
  return p;
}

Vec softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double s = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    s += p[k];
  }
  for (double& v : p) v /= s;
  return p;
}

ForwardTrace forward(const MlpModel& model, std::span<const double> x) {
  if (x.size() != model.input_dim()) {
    throw InputError("input has dimension " + std::to_string(x.size()) + ", model expects " +
                     std::to_string(model.input_dim()));
  }
  ForwardTrace tr;
  tr.inputs.reserve(model.num_layers());
  tr.inputs.emplace_back(x.begin(), x.end());
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Vec a = affine(model.weights[l], tr.inputs.back(), model.biases[l]);
    if (l + 1 == model.num_layers()) {
      tr.logits = std::move(a);
    } else {
      for (double& v : a) v = std::max(v, 0.0);
      tr.inputs.push_back(std::move(a));
    }
  }
  tr.probs = softmax(tr.logits);
  return tr;
}

std::vector<ForwardTrace> forward_batch(const MlpModel& model, const Matrix& xs) {
  std::vector<ForwardTrace> out;
  out.reserve(xs.rows());
  for (std::size_t i = 0; i < xs.rows(); ++i) out.push_back(forward(model, xs.row(i)));
  return out;
}

double cross_entropy(std::span<const double> target, std::span<const double> pred) {
  double s = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k] != 0.0) s -= target[k] * std::log(std::max(pred[k], kLogClamp));
  }
  return s;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) s += p[k] * (std::log(p[k]) - std::log(std::max(q[k], kLogClamp)));
  }
  return s;
}

GradientBundle backward_from_logits(const MlpModel& model, const ForwardTrace& trace,
                                    std::span<const double> logit_grad) {
  const std::size_t L = model.num_layers();
  GradientBundle g;
  g.weight_grads.resize(L);
  g.bias_grads.resize(L);
  g.signals.resize(L);
  Vec delta(logit_grad.begin(), logit_grad.end());
  for (std::size_t l = L; l-- > 0;) {
    const Vec& in = trace.inputs[l];
    Matrix gw(delta.size(), in.size());
    for (std::size_t r = 0; r < delta.size(); ++r) {
      for (std::size_t c = 0; c < in.size(); ++c) gw(r, c) = delta[r] * in[c];
    }
    g.weight_grads[l] = std::move(gw);
    g.bias_grads[l] = delta;
    g.signals[l] = delta;
    if (l == 0) break;
    // Rectifier derivative: the stored input to layer l is relu(pre), so active iff > 0.
    Vec prev(in.size(), 0.0);
    const Matrix& w = model.weights[l];
    for (std::size_t c = 0; c < in.size(); ++c) {
      if (in[c] <= 0.0) continue;
      double s = 0.0;
      for (std::size_t r = 0; r < delta.size(); ++r) s += w(r, c) * delta[r];
      prev[c] = s;
    }
    delta = std::move(prev);
  }
  return g;
}

GradientBundle backward(const MlpModel& model, const ForwardTrace& trace,
                        std::span<const double> target) {
  Vec gl(trace.probs.size());
  for (std::size_t k = 0; k < gl.size(); ++k) gl[k] = trace.probs[k] - target[k];
  return backward_from_logits(model, trace, gl);
}

MlpModel sgd_step(const MlpModel& model, const GradientBundle& grads, double eta) {
  if (grads.weight_grads.size() != model.num_layers()) {
    throw InputError("gradient bundle does not match model depth");
  }
  MlpModel next = model;
  for (std::size_t l = 0; l < next.num_layers(); ++l) {
    auto w = next.weights[l].flat();
    auto gw = grads.weight_grads[l].flat();
    if (gw.size() != w.size()) throw InputError("gradient shape mismatch");
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= eta * gw[k];
    for (std::size_t k = 0; k < next.biases[l].size(); ++k) {
      next.biases[l][k] -= eta * grads.bias_grads[l][k];
    }
  }
  return next;
}

LastLayerView extract_last_layer(const ForwardTrace& trace, std::span<const double> target) {
  LastLayerView v;
  v.z = trace.penultimate();
  v.g.resize(trace.probs.size());
  for (std::size_t k = 0; k < v.g.size(); ++k) v.g[k] = trace.probs[k] - target[k];
  return v;
}

void LrSchedule::validate() const {
  if (!(eta_max > 0.0)) throw ConfigError("eta_max must be positive");
  if (!(eta_min >= 0.0 && eta_min < eta_max)) throw ConfigError("eta_min must lie in [0, eta_max)");
  if (cycle_len < 2) throw ConfigError("cycle length must be at least 2");
  if (!(cycle_mult >= 1.0)) throw ConfigError("cycle multiplier must be >= 1");
}

LrSchedule::Position LrSchedule::position(std::int64_t t) const {
  if (t < 0) throw InputError("iteration index must be nonnegative");
  std::int64_t len = cycle_len;
  while (t >= len) {
    t -= len;
    len = std::max(len, static_cast<std::int64_t>(std::floor(static_cast<double>(len) * cycle_mult)));
  }
  return {t, len};
}

double LrSchedule::lr_at(std::int64_t t) const {
  const auto [cur, len] = position(t);
  if (cur == len - 1) return eta_min;
  const double phase = std::numbers::pi * static_cast<double>(cur) / static_cast<double>(len - 1);
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(phase));
}

bool LrSchedule::is_cycle_end(std::int64_t t) const {
  const auto [cur, len] = position(t);
  return cur == len - 1;
}

}  // namespace metaval
