#include "metaval/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metaval/errors.hpp"

namespace metaval {

namespace {

enum Stream : std::uint64_t {
  kDataStream = 1,
  kLongtailStream,
  kNoiseStream,
  kTestStream,
  kInitStream,
  kWarmupStream,
  kReinitStream,
  kBatchStream,
  kLossStream,
  kSelectStream = 100,
};

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) { return mix_seed(seed, stream); }

}  // namespace

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kMaxUtility: return "max_utility";
    case SelectionStrategy::kRandom: return "random";
    case SelectionStrategy::kMostConfident: return "most_confident";
    case SelectionStrategy::kWeightOnly: return "weight_only";
    case SelectionStrategy::kInfoOnly: return "info_only";
  }
  return "unknown";
}

SelectionStrategy parse_strategy(const std::string& name) {
  for (auto s : {SelectionStrategy::kMaxUtility, SelectionStrategy::kRandom,
                 SelectionStrategy::kMostConfident, SelectionStrategy::kWeightOnly,
                 SelectionStrategy::kInfoOnly}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown selection strategy '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (num_classes < 2) throw ConfigError("classes must be >= 2");
  if (train_csv.empty()) {
    if (n_max < 1) throw ConfigError("n_max must be >= 1");
    if (dim < 2) throw ConfigError("dim must be >= 2");
    if (!(spread > 0.0)) throw ConfigError("spread must be positive");
    if (test_per_class < 1) throw ConfigError("test_per_class must be >= 1");
  }
  if (!(noise.rate >= 0.0 && noise.rate < 1.0)) throw ConfigError("noise_rate must lie in [0, 1)");
  if (!(imbalance.ratio >= 1.0)) throw ConfigError("imbalance_ratio must be >= 1");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("hidden layer sizes must be positive");
  }
  schedule.validate();
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (update_interval < 0) throw ConfigError("update_interval must be >= 0");
  if (update_interval > 0 && iterations > 0 && update_interval > iterations) {
    throw ConfigError("update_interval must not exceed iterations");
  }
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
  if (candidates_per_class < 1) throw ConfigError("N must be >= 1");
  if (val_per_class < 1) throw ConfigError("M must be >= 1");
  if (val_per_class >= lower_per_class) throw ConfigError("M must be smaller than K");
  if (window < 1) throw ConfigError("E must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(meta.lambda0 >= 0.0 && meta.lambda0 <= 1.0)) throw ConfigError("lambda0 must lie in [0, 1]");
  if (meta.p_mix < 0.0 || meta.k_kl < 0.0) throw ConfigError("p_mix and k_kl must be >= 0");
  if (!(meta.mixup_alpha > 0.0)) throw ConfigError("mixup_alpha must be positive");
  if (!(meta.augment_strength > 0.0)) throw ConfigError("augment_strength must be positive");
  if (!(meta.eta_omega > 0.0)) throw ConfigError("eta_omega must be positive");
  if (warmup.max_epochs < 1) throw ConfigError("warmup_epochs must be >= 1");
  if (warmup.batch_size < 1) throw ConfigError("warmup_batch must be >= 1");
  if (!(warmup.holdout_fraction > 0.0 && warmup.holdout_fraction < 1.0)) {
    throw ConfigError("warmup_holdout must lie in (0, 1)");
  }
}

std::vector<std::size_t> ExperimentConfig::layer_dims(std::size_t input_dim) const {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(static_cast<std::size_t>(num_classes));
  return dims;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v, std::size_t line) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ParseError("expected a number, got '" + v + "'", line);
  }
}

long long to_int(const std::string& v, std::size_t line) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ParseError("expected an integer, got '" + v + "'", line);
  }
}

std::size_t to_size(const std::string& v, std::size_t line) {
  const long long d = to_int(v, line);
  if (d < 0) throw ParseError("expected a nonnegative integer, got '" + v + "'", line);
  return static_cast<std::size_t>(d);
}

bool to_bool(const std::string& v, std::size_t line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParseError("expected true/false, got '" + v + "'", line);
}

template <class T, class Fn>
std::vector<T> to_list(const std::string& v, std::size_t line, Fn fn) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = trim(cell);
    if (!cell.empty()) out.push_back(static_cast<T>(fn(cell, line)));
  }
  return out;
}

template <class E>
E to_enum(const std::string& v, std::size_t line, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, e] : table) {
    if (v == name) return e;
  }
  throw ParseError("unrecognised value '" + v + "'", line);
}

}  // namespace

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    const auto n = lineno;

    if (key == "train_csv") c.train_csv = v;
    else if (key == "test_csv") c.test_csv = v;
    else if (key == "generator") c.generator = to_enum<SyntheticKind>(v, n, {{"blobs", SyntheticKind::kGaussianBlobs}, {"spirals", SyntheticKind::kSpirals}});
    else if (key == "classes") c.num_classes = static_cast<int>(to_int(v, n));
    else if (key == "n_max") c.n_max = to_size(v, n);
    else if (key == "dim") c.dim = to_size(v, n);
    else if (key == "spread") c.spread = to_double(v, n);
    else if (key == "test_per_class") c.test_per_class = to_size(v, n);
    else if (key == "noise") c.noise.kind = to_enum<NoiseKind>(v, n, {{"symmetric", NoiseKind::kSymmetric}, {"asymmetric", NoiseKind::kAsymmetric}, {"openset", NoiseKind::kOpenSet}});
    else if (key == "noise_rate") c.noise.rate = to_double(v, n);
    else if (key == "pair_map") c.noise.pair_map = to_list<int>(v, n, to_int);
    else if (key == "outlier_displacement") c.noise.outliers.displacement = to_double(v, n);
    else if (key == "outlier_spread") c.noise.outliers.spread = to_double(v, n);
    else if (key == "imbalance_ratio") c.imbalance.ratio = to_double(v, n);
    else if (key == "hidden") c.hidden = to_list<std::size_t>(v, n, to_size);
    else if (key == "eta_max") c.schedule.eta_max = to_double(v, n);
    else if (key == "eta_min") c.schedule.eta_min = to_double(v, n);
    else if (key == "cycle_len") c.schedule.cycle_len = to_int(v, n);
    else if (key == "cycle_mult") c.schedule.cycle_mult = to_double(v, n);
    else if (key == "iterations") c.iterations = to_int(v, n);
    else if (key == "robust_start") c.robust_start = to_int(v, n);
    else if (key == "update_interval") c.update_interval = to_int(v, n);
    else if (key == "robust_lr_threshold") c.robust_lr_threshold = to_double(v, n);
    else if (key == "kappa") c.kappa = to_double(v, n);
    else if (key == "N") c.candidates_per_class = to_size(v, n);
    else if (key == "M") c.val_per_class = to_size(v, n);
    else if (key == "K") c.lower_per_class = to_size(v, n);
    else if (key == "E") c.window = to_size(v, n);
    else if (key == "batch_size") c.batch_size = to_size(v, n);
    else if (key == "lambda0") c.meta.lambda0 = to_double(v, n);
    else if (key == "eta_omega") c.meta.eta_omega = to_double(v, n);
    else if (key == "p_mix") c.meta.p_mix = to_double(v, n);
    else if (key == "k_kl") c.meta.k_kl = to_double(v, n);
    else if (key == "mixup_alpha") c.meta.mixup_alpha = to_double(v, n);
    else if (key == "augment_strength") c.meta.augment_strength = to_double(v, n);
    else if (key == "flip_lambda_sign") c.meta.flip_lambda_sign = to_bool(v, n);
    else if (key == "probe_scope") c.meta.probe_scope = to_enum<UpdateScope>(v, n, {{"last_layer", UpdateScope::kLastLayerWeights}, {"full", UpdateScope::kFull}});
    else if (key == "mixup_label") c.meta.mixup_label = to_enum<MixupLabel>(v, n, {{"resolved", MixupLabel::kResolved}, {"observed", MixupLabel::kObserved}});
    else if (key == "warmup_epochs") c.warmup.max_epochs = to_size(v, n);
    else if (key == "warmup_patience") c.warmup.patience = to_size(v, n);
    else if (key == "warmup_eta") c.warmup.eta = to_double(v, n);
    else if (key == "warmup_batch") c.warmup.batch_size = to_size(v, n);
    else if (key == "warmup_holdout") c.warmup.holdout_fraction = to_double(v, n);
    else if (key == "strategy") {
      try {
        c.strategy = parse_strategy(v);
      } catch (const ConfigError& e) {
        throw ParseError(e.what(), n);
      }
    }
    else if (key == "clean_metric") c.clean_metric = to_enum<CleanMetric>(v, n, {{"dot", CleanMetric::kDot}, {"cosine", CleanMetric::kCosine}});
    else if (key == "training_rule") c.training_rule = to_enum<TrainingSetRule>(v, n, {{"all", TrainingSetRule::kAllButValidation}, {"clean", TrainingSetRule::kCleanButValidation}});
    else if (key == "gradient_target") c.gradient_target = to_enum<GradientTarget>(v, n, {{"observed", GradientTarget::kObserved}, {"robust", GradientTarget::kRobust}});
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_size(v, n));
    else throw ParseError("unknown key '" + key + "'", n);
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto list = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  if (!c.train_csv.empty()) o << "train_csv = " << c.train_csv << '\n';
  if (!c.test_csv.empty()) o << "test_csv = " << c.test_csv << '\n';
  o << "generator = " << (c.generator == SyntheticKind::kGaussianBlobs ? "blobs" : "spirals") << '\n'
    << "classes = " << c.num_classes << '\n'
    << "n_max = " << c.n_max << '\n'
    << "dim = " << c.dim << '\n'
    << "spread = " << c.spread << '\n'
    << "test_per_class = " << c.test_per_class << '\n'
    << "noise = "
    << (c.noise.kind == NoiseKind::kSymmetric ? "symmetric"
        : c.noise.kind == NoiseKind::kAsymmetric ? "asymmetric"
                                                 : "openset")
    << '\n'
    << "noise_rate = " << c.noise.rate << '\n';
  if (!c.noise.pair_map.empty()) o << "pair_map = " << list(c.noise.pair_map) << '\n';
  o << "outlier_displacement = " << c.noise.outliers.displacement << '\n'
    << "outlier_spread = " << c.noise.outliers.spread << '\n'
    << "imbalance_ratio = " << c.imbalance.ratio << '\n'
    << "hidden = " << list(c.hidden) << '\n'
    << "eta_max = " << c.schedule.eta_max << '\n'
    << "eta_min = " << c.schedule.eta_min << '\n'
    << "cycle_len = " << c.schedule.cycle_len << '\n'
    << "cycle_mult = " << c.schedule.cycle_mult << '\n'
    << "iterations = " << c.iterations << '\n'
    << "robust_start = " << c.robust_start << '\n'
    << "update_interval = " << c.update_interval << '\n'
    << "robust_lr_threshold = " << c.robust_lr_threshold << '\n'
    << "kappa = " << c.kappa << '\n'
    << "N = " << c.candidates_per_class << '\n'
    << "M = " << c.val_per_class << '\n'
    << "K = " << c.lower_per_class << '\n'
    << "E = " << c.window << '\n'
    << "batch_size = " << c.batch_size << '\n'
    << "lambda0 = " << c.meta.lambda0 << '\n'
    << "eta_omega = " << c.meta.eta_omega << '\n'
    << "p_mix = " << c.meta.p_mix << '\n'
    << "k_kl = " << c.meta.k_kl << '\n'
    << "mixup_alpha = " << c.meta.mixup_alpha << '\n'
    << "augment_strength = " << c.meta.augment_strength << '\n'
    << "flip_lambda_sign = " << (c.meta.flip_lambda_sign ? "true" : "false") << '\n'
    << "probe_scope = " << (c.meta.probe_scope == UpdateScope::kFull ? "full" : "last_layer") << '\n'
    << "mixup_label = " << (c.meta.mixup_label == MixupLabel::kResolved ? "resolved" : "observed") << '\n'
    << "warmup_epochs = " << c.warmup.max_epochs << '\n'
    << "warmup_patience = " << c.warmup.patience << '\n'
    << "warmup_eta = " << c.warmup.eta << '\n'
    << "warmup_batch = " << c.warmup.batch_size << '\n'
    << "warmup_holdout = " << c.warmup.holdout_fraction << '\n'
    << "strategy = " << to_string(c.strategy) << '\n'
    << "clean_metric = " << (c.clean_metric == CleanMetric::kDot ? "dot" : "cosine") << '\n'
    << "training_rule = " << (c.training_rule == TrainingSetRule::kAllButValidation ? "all" : "clean") << '\n'
    << "gradient_target = " << (c.gradient_target == GradientTarget::kObserved ? "observed" : "robust") << '\n'
    << "seed = " << c.seed << '\n';
  return o.str();
}

ExperimentData build_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  Dataset clean;
  if (cfg.train_csv.empty()) {
    SyntheticSpec spec{cfg.generator, cfg.num_classes, cfg.n_max, cfg.dim, cfg.spread};
    clean = gen_synthetic(spec, sub_seed(cfg.seed, kDataStream));
    spec.n_per_class = cfg.test_per_class;
    d.test = gen_synthetic(spec, sub_seed(cfg.seed, kTestStream));
  } else {
    clean = load_csv(cfg.train_csv, cfg.num_classes);
    if (cfg.test_csv.empty()) throw ConfigError("test_csv is required with train_csv");
    d.test = load_csv(cfg.test_csv, cfg.num_classes);
  }
  Dataset lt = cfg.imbalance.ratio > 1.0 ? apply_longtail(clean, cfg.imbalance, sub_seed(cfg.seed, kLongtailStream))
                                         : clean;
  d.train = inject_noise(lt, cfg.noise, sub_seed(cfg.seed, kNoiseStream));
  return d;
}

double evaluate(const MlpModel& model, const Dataset& test) {
  if (test.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto tr = forward(model, test.features.row(i));
    if (!test.openset_mask[i] && argmax_lowest(tr.probs) == test.clean_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::vector<std::size_t> most_confident(std::span<const std::size_t> rows,
                                        const std::vector<Vec>& probs, std::span<const int> labels,
                                        int num_classes, std::size_t per_class) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (auto i : rows) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> out;
  for (auto& members : by_class) {
    std::sort(members.begin(), members.end());
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return *std::max_element(probs[a].begin(), probs[a].end()) >
             *std::max_element(probs[b].begin(), probs[b].end());
    });
    const std::size_t take = std::min(per_class, members.size());
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

SelectionResult select_validation(const ExperimentConfig& cfg, const MlpModel& model,
                                  const Dataset& ds, const FeatureTable& feats,
                                  std::span<const std::size_t> pool,
                                  std::span<const std::size_t> clean_set, std::uint64_t seed) {
  const std::size_t M = cfg.val_per_class;
  if (cfg.strategy == SelectionStrategy::kMaxUtility || cfg.strategy == SelectionStrategy::kWeightOnly) {
    SelectionParams params{M, cfg.lower_per_class, cfg.clean_metric, cfg.training_rule,
                           cfg.strategy == SelectionStrategy::kWeightOnly ? LowerObjective::kWeightSum
                                                                          : LowerObjective::kInfo};
    return max_utility(pool, clean_set, feats, params, ds.size());
  }

  SelectionResult r;
  std::vector<std::size_t> chosen;
  switch (cfg.strategy) {
    case SelectionStrategy::kRandom: {
      Rng rng = make_rng(seed, 0x7a4d);
      std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
      for (auto i : clean_set) by_class[static_cast<std::size_t>(ds.observed_labels[i])].push_back(i);
      for (auto& members : by_class) {
        std::sort(members.begin(), members.end());
        std::shuffle(members.begin(), members.end(), rng);
        const std::size_t take = std::min(M, members.size());
        chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
      }
      break;
    }
    case SelectionStrategy::kMostConfident: {
      std::vector<Vec> probs(ds.size());
      for (auto i : clean_set) probs[i] = forward(model, ds.features.row(i)).probs;
      chosen = most_confident(clean_set, probs, ds.observed_labels, ds.num_classes, M);
      break;
    }
    case SelectionStrategy::kInfoOnly:
      chosen = greedy_lower(pool, feats, M).sequence;
      break;
    case SelectionStrategy::kMaxUtility:
    case SelectionStrategy::kWeightOnly:
      break;
  }
  r.upper_sequence = chosen;
  std::sort(chosen.begin(), chosen.end());
  r.validation_set = chosen;
  r.lower_set = chosen;
  r.lower_sequence = r.upper_sequence;
  r.lower_objective = info_objective(r.lower_set, pool, feats);
  r.upper_objective = clean_objective(r.validation_set, clean_set, feats, cfg.clean_metric);
  std::vector<std::size_t> per_class(static_cast<std::size_t>(ds.num_classes), 0);
  for (auto i : chosen) ++per_class[static_cast<std::size_t>(ds.observed_labels[i])];
  for (int c = 0; c < ds.num_classes; ++c) {
    if (per_class[static_cast<std::size_t>(c)] < M) {
      r.warnings.push_back("class " + std::to_string(c) + " supplies fewer than M=" + std::to_string(M) +
                           " validation samples");
    }
  }
  fill_training_set(r, ds.size(), clean_set, cfg.training_rule);
  return r;
}

namespace {

// Mutable state of one run of the training procedure.
class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, const ExperimentData& data)
      : cfg_(cfg), ds_(data.train), test_(data.test) {
    const auto n = static_cast<std::int64_t>(ds_.size());
    const auto B = static_cast<std::int64_t>(cfg.batch_size);
    epoch_iters_ = std::max<std::int64_t>(1, (n + B - 1) / B);
    update_interval_ = cfg.update_interval > 0 ? cfg.update_interval : epoch_iters_;
    robust_start_ = cfg.robust_start >= 0 ? cfg.robust_start : cfg.iterations / 4;
    robust_lr_ = cfg.robust_lr_threshold >= 0.0 ? cfg.robust_lr_threshold
                                                : 0.5 * (cfg.schedule.eta_max + cfg.schedule.eta_min);
    batch_rng_ = make_rng(cfg.seed, kBatchStream);
    loss_rng_ = make_rng(cfg.seed, kLossStream);
  }

  ExperimentResult run() {
    const auto dims = cfg_.layer_dims(ds_.dim());
    WarmupConfig wcfg = cfg_.warmup;
    wcfg.seed = sub_seed(cfg_.seed, kWarmupStream);
    model_ = warmup_train(MlpModel::init(dims, sub_seed(cfg_.seed, kInitStream)), ds_, wcfg);

    detect_clean();
    states_.assign(ds_.size(), SampleState{});
    for (std::size_t i = 0; i < ds_.size(); ++i) {
      states_[i].robust_label = forward(model_, ds_.features.row(i)).probs;
    }
    reselect();
    model_ = MlpModel::init(dims, sub_seed(cfg_.seed, kReinitStream));

    for (std::int64_t t = 1; t <= cfg_.iterations; ++t) {
      const std::int64_t s = t - 1;
      MetaBatch batch{next_batch(), selection_.validation_set};
      auto step = meta_train_step(model_, ds_, batch, cfg_.schedule, s, cfg_.meta, loss_rng_);
      model_ = std::move(step.model);
      tally_omega(batch, step.report.omega);

      if (t % epoch_iters_ == 0) {
        for (std::size_t i = 0; i < ds_.size(); ++i) {
          states_[i].push_prediction(forward(model_, ds_.features.row(i)).probs, cfg_.window);
        }
        if (t > robust_start_ && cfg_.schedule.lr_at(s) < robust_lr_) {
          for (auto& st : states_) update_moving_avg(st, cfg_.kappa, cfg_.window);
        }
      }
      if (cfg_.schedule.is_cycle_end(s)) detect_clean();
      if (t % update_interval_ == 0) {
        reselect();
        record(t, cfg_.schedule.lr_at(s));
      }
    }
    if (result_.metrics.empty() || result_.metrics.back().iter != cfg_.iterations) {
      record(cfg_.iterations, cfg_.schedule.lr_at(std::max<std::int64_t>(cfg_.iterations - 1, 0)));
    }
    result_.model = model_;
    result_.selection = selection_;
    result_.clean_set = clean_set_;
    return std::move(result_);
  }

 private:
  void detect_clean() {
    clean_set_ = partition_small_loss(per_sample_losses(model_, ds_)).clean_idx;
  }

  void reselect() {
    std::vector<Vec> robust(ds_.size());
    for (std::size_t i = 0; i < ds_.size(); ++i) robust[i] = states_[i].robust_label;
    const auto seed = sub_seed(cfg_.seed, kSelectStream + selections_++);
    auto cand = build_candidate_subset(clean_set_, ds_.observed_labels, robust, ds_.num_classes,
                                       cfg_.candidates_per_class, seed);
    for (int c : cand.empty_classes) {
      result_.warnings.push_back("no label-consistent pseudo-clean samples in class " + std::to_string(c));
    }
    const FeatureTable feats = cfg_.gradient_target == GradientTarget::kObserved
                                   ? compute_features(model_, ds_)
                                   : compute_features(model_, ds_, robust);
    selection_ = select_validation(cfg_, model_, ds_, feats, cand.indices, clean_set_, seed);
    if (selection_.validation_set.empty()) throw ConfigError("selection produced an empty validation set");
    result_.warnings.insert(result_.warnings.end(), selection_.warnings.begin(), selection_.warnings.end());
    order_.clear();
    cursor_ = 0;
  }

  std::vector<std::size_t> next_batch() {
    const auto& pool = selection_.training_set;
    std::vector<std::size_t> batch;
    const std::size_t B = std::min(cfg_.batch_size, pool.size());
    while (batch.size() < B) {
      if (cursor_ >= order_.size()) {
        order_ = pool;
        std::shuffle(order_.begin(), order_.end(), batch_rng_);
        cursor_ = 0;
      }
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

  void tally_omega(const MetaBatch& batch, const std::vector<double>& omega) {
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (ds_.is_clean(batch.train_indices[r])) {
        omega_clean_ += omega[r];
        ++n_clean_;
      } else {
        omega_noisy_ += omega[r];
        ++n_noisy_;
      }
    }
  }

  void record(std::int64_t t, double lr) {
    MetricsRecord m;
    m.iter = t;
    m.test_acc = evaluate(model_, test_);
    m.lr = lr;
    std::size_t vc = 0;
    for (auto i : selection_.validation_set) vc += ds_.is_clean(i) ? 1 : 0;
    m.val_clean = selection_.validation_set.empty()
                      ? 0.0
                      : static_cast<double>(vc) / static_cast<double>(selection_.validation_set.size());
    std::size_t dc = 0;
    std::size_t total_clean = 0;
    for (auto i : clean_set_) dc += ds_.is_clean(i) ? 1 : 0;
    for (std::size_t i = 0; i < ds_.size(); ++i) total_clean += ds_.is_clean(i) ? 1 : 0;
    m.dc_precision = clean_set_.empty() ? 0.0 : static_cast<double>(dc) / static_cast<double>(clean_set_.size());
    m.dc_recall = total_clean == 0 ? 0.0 : static_cast<double>(dc) / static_cast<double>(total_clean);
    m.omega_clean_mean = n_clean_ ? omega_clean_ / static_cast<double>(n_clean_) : 0.0;
    m.omega_noisy_mean = n_noisy_ ? omega_noisy_ / static_cast<double>(n_noisy_) : 0.0;
    m.info_obj = selection_.lower_objective;
    m.clean_obj = selection_.upper_objective;
    result_.metrics.push_back(m);
    omega_clean_ = omega_noisy_ = 0.0;
    n_clean_ = n_noisy_ = 0;
  }

  const ExperimentConfig& cfg_;
  const Dataset& ds_;
  const Dataset& test_;
  std::int64_t epoch_iters_ = 1;
  std::int64_t update_interval_ = 1;
  std::int64_t robust_start_ = 0;
  double robust_lr_ = 0.0;
  Rng batch_rng_;
  Rng loss_rng_;

  MlpModel model_;
  std::vector<std::size_t> clean_set_;
  std::vector<SampleState> states_;
  SelectionResult selection_;
  std::uint64_t selections_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  double omega_clean_ = 0.0;
  double omega_noisy_ = 0.0;
  std::size_t n_clean_ = 0;
  std::size_t n_noisy_ = 0;
  ExperimentResult result_;
};

}  // namespace

ExperimentResult run_pipeline(const ExperimentConfig& cfg, const ExperimentData& data) {
  cfg.validate();
  data.train.validate();
  if (data.train.num_classes != cfg.num_classes || data.test.num_classes != cfg.num_classes) {
    throw ConfigError("dataset class count does not match config");
  }
  if (data.test.dim() != data.train.dim()) throw ConfigError("test features have a different dimension");
  return Trainer(cfg, data).run();
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return run_pipeline(cfg, build_data(cfg));
}

std::string metrics_to_jsonl(const std::vector<MetricsRecord>& stream) {
  std::string out;
  for (const auto& m : stream) {
    nlohmann::ordered_json j;
    j["iter"] = m.iter;
    j["test_acc"] = m.test_acc;
    j["val_clean"] = m.val_clean;
    j["dc_precision"] = m.dc_precision;
    j["dc_recall"] = m.dc_recall;
    j["lr"] = m.lr;
    j["omega_clean_mean"] = m.omega_clean_mean;
    j["omega_noisy_mean"] = m.omega_noisy_mean;
    j["info_obj"] = m.info_obj;
    j["clean_obj"] = m.clean_obj;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string metrics_to_csv(const std::vector<MetricsRecord>& stream) {
  std::string out;
  const auto& cols = metrics_columns();
  for (std::size_t k = 0; k < cols.size(); ++k) out += (k ? "," : "") + cols[k];
  out += '\n';
  char buf[64];
  for (const auto& m : stream) {
    out += std::to_string(m.iter);
    for (double v : {m.test_acc, m.val_clean, m.dc_precision, m.dc_recall, m.lr, m.omega_clean_mean,
                     m.omega_noisy_mean, m.info_obj, m.clean_obj}) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<MetricsRecord> parse_metrics_jsonl(const std::string& text) {
  std::vector<MetricsRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MetricsRecord m;
      m.iter = j.at("iter").get<std::int64_t>();
      m.test_acc = j.at("test_acc").get<double>();
      m.val_clean = j.at("val_clean").get<double>();
      m.dc_precision = j.at("dc_precision").get<double>();
      m.dc_recall = j.at("dc_recall").get<double>();
      m.lr = j.at("lr").get<double>();
      m.omega_clean_mean = j.at("omega_clean_mean").get<double>();
      m.omega_noisy_mean = j.at("omega_noisy_mean").get<double>();
      m.info_obj = j.at("info_obj").get<double>();
      m.clean_obj = j.at("clean_obj").get<double>();
      out.push_back(m);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

void emit_metrics(const std::vector<MetricsRecord>& stream, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::pair<std::filesystem::path, std::string> files[] = {
      {dir / "metrics.jsonl", metrics_to_jsonl(stream)},
      {dir / "metrics.csv", metrics_to_csv(stream)},
  };
  for (const auto& [path, body] : files) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << body;
    if (!out) throw IoError("write failed for " + path.string());
  }
}

}  // namespace metaval
