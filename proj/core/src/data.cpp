#include "metaval/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "metaval/errors.hpp"

namespace metaval {

Vec one_hot(int cls, int num_classes) {
  Vec v(static_cast<std::size_t>(num_classes), 0.0);
  v[static_cast<std::size_t>(cls)] = 1.0;
  return v;
}

Vec Dataset::observed_one_hot(std::size_t i) const { return one_hot(observed_labels[i], num_classes); }

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : observed_labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.num_classes = num_classes;
  out.features = Matrix(rows.size(), dim());
  out.clean_labels.reserve(rows.size());
  out.observed_labels.reserve(rows.size());
  out.openset_mask.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t r = rows[k];
    std::copy(features.row(r).begin(), features.row(r).end(), out.features.row(k).begin());
    out.clean_labels.push_back(clean_labels[r]);
    out.observed_labels.push_back(observed_labels[r]);
    out.openset_mask.push_back(openset_mask[r]);
  }
  return out;
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (num_classes < 2) throw InputError("dataset needs at least two classes");
  if (features.rows() != n || clean_labels.size() != n || openset_mask.size() != n) {
    throw InputError("dataset columns have inconsistent lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (observed_labels[i] < 0 || observed_labels[i] >= num_classes) {
      throw InputError("observed label out of range at row " + std::to_string(i));
    }
    const bool sentinel = clean_labels[i] == openset_sentinel();
    if (openset_mask[i] != sentinel) {
      throw InputError("open-set mask disagrees with clean label at row " + std::to_string(i));
    }
    if (!sentinel && (clean_labels[i] < 0 || clean_labels[i] >= num_classes)) {
      throw InputError("clean label out of range at row " + std::to_string(i));
    }
    for (double v : features.row(i)) {
      if (!std::isfinite(v)) throw InputError("non-finite feature at row " + std::to_string(i));
    }
  }
}

Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw InputError("synthetic data needs C >= 2");
  if (spec.n_per_class < 1) throw InputError("synthetic data needs n_per_class >= 1");
  if (spec.dim < 2) throw InputError("synthetic data needs d >= 2");
  const auto C = static_cast<std::size_t>(spec.num_classes);
  const std::size_t n = C * spec.n_per_class;
  Rng rng = make_rng(seed, 0xda7a);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.features = Matrix(n, spec.dim);
  ds.clean_labels.resize(n);
  ds.openset_mask.assign(n, false);
  std::size_t row = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(C);
    for (std::size_t k = 0; k < spec.n_per_class; ++k, ++row) {
      auto x = ds.features.row(row);
      if (spec.kind == SyntheticKind::kGaussianBlobs) {
        x[0] = std::cos(angle);
        x[1] = std::sin(angle);
      } else {
        const double t = unit(rng);
        const double theta = angle + 1.5 * std::numbers::pi * t;
        const double r = 0.2 + t;
        x[0] = r * std::cos(theta);
        x[1] = r * std::sin(theta);
      }
      for (double& v : x) v += spec.spread * noise(rng);
      ds.clean_labels[row] = static_cast<int>(c);
    }
  }
  ds.observed_labels = ds.clean_labels;
  return ds;
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  const auto end = s.find_last_not_of(ws);
  s.erase(end == std::string::npos ? 0 : end + 1);
  return s;
}

double parse_double(const std::string& s, std::size_t line) {
  const std::string t = trim(s);
  double v = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (t.empty() || ec != std::errc{} || ptr != last || !std::isfinite(v)) {
    throw ParseError("cannot parse feature value '" + t + "'", line);
  }
  return v;
}

int parse_int(const std::string& s, std::size_t line) {
  const std::string t = trim(s);
  int v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size()) {
    throw ParseError("cannot parse label '" + t + "'", line);
  }
  return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, std::optional<int> num_classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file " + path.string(), 1);
  const auto header = split_commas(trim(line));
  bool has_clean = !header.empty() && trim(header.back()) == "clean_label";
  const std::size_t label_col = header.size() - (has_clean ? 2 : 1);
  if (header.size() < (has_clean ? 3u : 2u) || trim(header[label_col]) != "label") {
    throw ParseError("header must be f0,...,f{d-1},label[,clean_label]", 1);
  }
  for (std::size_t k = 0; k < label_col; ++k) {
    if (trim(header[k]) != "f" + std::to_string(k)) {
      throw ParseError("expected feature column f" + std::to_string(k), 1);
    }
  }
  const std::size_t d = label_col;

  std::vector<double> feats;
  std::vector<int> labels;
  std::vector<int> cleans;
  std::vector<std::size_t> line_of;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(trim(line));
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " columns, got " +
                           std::to_string(cells.size()),
                       lineno);
    }
    for (std::size_t k = 0; k < d; ++k) feats.push_back(parse_double(cells[k], lineno));
    labels.push_back(parse_int(cells[label_col], lineno));
    if (has_clean) cleans.push_back(parse_int(cells[label_col + 1], lineno));
    line_of.push_back(lineno);
  }

  int C = 0;
  if (num_classes) {
    C = *num_classes;
  } else {
    for (int y : labels) C = std::max(C, y + 1);
    for (int y : cleans) C = std::max(C, y);  // the sentinel never defines C
  }
  if (C < 2) throw ParseError("fewer than two classes in " + path.string(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= C) {
      throw ParseError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(C) + ")",
                       line_of[i]);
    }
    if (has_clean && (cleans[i] < 0 || cleans[i] > C)) {
      throw ParseError("clean_label " + std::to_string(cleans[i]) + " outside [0, " +
                           std::to_string(C) + "]",
                       line_of[i]);
    }
  }

  Dataset ds;
  ds.num_classes = C;
  ds.features = Matrix(labels.size(), d);
  std::copy(feats.begin(), feats.end(), ds.features.flat().begin());
  ds.observed_labels = labels;
  ds.clean_labels = has_clean ? cleans : labels;
  ds.openset_mask.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) ds.openset_mask[i] = ds.clean_labels[i] == C;
  return ds;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path, bool with_clean_label) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t k = 0; k < ds.dim(); ++k) out << 'f' << k << ',';
  out << "label";
  if (with_clean_label) out << ",clean_label";
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.features.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << ds.observed_labels[i];
    if (with_clean_label) out << ',' << ds.clean_labels[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InputError("noise rate must lie in [0, 1)");
}

}  // namespace

Dataset inject_symmetric(const Dataset& ds, double rate, std::uint64_t seed) {
  check_rate(rate);
  Dataset out = ds;
  Rng rng = make_rng(seed, 0x5e11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, ds.num_classes - 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (unit(rng) >= rate) continue;
    int c = other(rng);
    if (c >= out.observed_labels[i]) ++c;
    out.observed_labels[i] = c;
  }
  return out;
}

std::vector<int> cyclic_pair_map(int num_classes) {
  std::vector<int> m(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) m[static_cast<std::size_t>(c)] = (c + 1) % num_classes;
  return m;
}

Dataset inject_asymmetric(const Dataset& ds, double rate, std::span<const int> pair_map,
                          std::uint64_t seed) {
  check_rate(rate);
  if (pair_map.size() != static_cast<std::size_t>(ds.num_classes)) {
    throw InputError("pair map must cover every class");
  }
  for (int c : pair_map) {
    if (c < 0 || c >= ds.num_classes) throw InputError("pair map target out of range");
  }
  Dataset out = ds;
  Rng rng = make_rng(seed, 0xa5a5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool flip = unit(rng) < rate;
    if (flip) out.observed_labels[i] = pair_map[static_cast<std::size_t>(out.observed_labels[i])];
  }
  return out;
}

Dataset inject_openset(const Dataset& ds, double rate, const OutlierSpec& outliers,
                       std::uint64_t seed) {
  check_rate(rate);
  Dataset out = ds;
  if (rate == 0.0 || ds.size() == 0) return out;

  const std::size_t d = ds.dim();
  const auto C = static_cast<std::size_t>(ds.num_classes);
  std::vector<Vec> means(C, Vec(d, 0.0));
  std::vector<std::size_t> counts(C, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.openset_mask[i]) continue;
    const auto c = static_cast<std::size_t>(ds.clean_labels[i]);
    for (std::size_t k = 0; k < d; ++k) means[c][k] += ds.features(i, k);
    ++counts[c];
  }
  Vec centroid(d, 0.0);
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t k = 0; k < d; ++k) {
      means[c][k] /= static_cast<double>(counts[c]);
      centroid[k] += means[c][k];
    }
    ++present;
  }
  for (double& v : centroid) v /= static_cast<double>(std::max<std::size_t>(present, 1));
  double radius = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    if (counts[c] == 0) continue;
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (means[c][k] - centroid[k]) * (means[c][k] - centroid[k]);
    radius = std::max(radius, std::sqrt(s));
  }
  // Distance from the centre to any class mean is at least displacement * spread.
  Vec centre = centroid;
  centre[d - 1] += radius + outliers.displacement * outliers.spread;

  Rng rng = make_rng(seed, 0x0be5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, ds.num_classes - 1);
  std::normal_distribution<double> noise(0.0, outliers.spread);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (unit(rng) >= rate) continue;
    auto x = out.features.row(i);
    for (std::size_t k = 0; k < d; ++k) x[k] = centre[k] + noise(rng);
    out.observed_labels[i] = label(rng);
    out.clean_labels[i] = out.openset_sentinel();
    out.openset_mask[i] = true;
  }
  return out;
}

Dataset inject_noise(const Dataset& ds, const NoiseSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case NoiseKind::kSymmetric:
      return inject_symmetric(ds, spec.rate, seed);
    case NoiseKind::kAsymmetric: {
      const auto map = spec.pair_map.empty() ? cyclic_pair_map(ds.num_classes) : spec.pair_map;
      return inject_asymmetric(ds, spec.rate, map, seed);
    }
    case NoiseKind::kOpenSet:
      return inject_openset(ds, spec.rate, spec.outliers, seed);
  }
  throw InputError("unknown noise kind");
}

std::vector<std::size_t> longtail_sizes(std::size_t n_max, int num_classes, double ratio) {
  if (!(ratio >= 1.0)) throw InputError("imbalance ratio must be >= 1");
  std::vector<std::size_t> sizes(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    const double expo = num_classes > 1 ? -static_cast<double>(c) / (num_classes - 1) : 0.0;
    sizes[static_cast<std::size_t>(c)] =
        static_cast<std::size_t>(std::llround(static_cast<double>(n_max) * std::pow(ratio, expo)));
  }
  return sizes;
}

Dataset apply_longtail(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed) {
  const auto counts = ds.class_counts();
  const std::size_t n_max = *std::max_element(counts.begin(), counts.end());
  const auto sizes = longtail_sizes(n_max, ds.num_classes, spec.ratio);
  Rng rng = make_rng(seed, 0x17a1);
  std::vector<std::size_t> keep;
  for (int c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.observed_labels[i] == c) rows.push_back(i);
    }
    const std::size_t want = sizes[static_cast<std::size_t>(c)];
    if (rows.size() < want) {
      throw SizingError("class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                            " samples, long-tail profile needs " + std::to_string(want),
                        c);
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

Vec augment(std::span<const double> x, double strength, Rng& rng) {
  if (!(strength > 0.0)) throw InputError("augmentation strength must be positive");
  std::normal_distribution<double> noise(0.0, strength);
  Vec out(x.begin(), x.end());
  for (double& v : out) v += noise(rng);
  return out;
}

Vec augment(std::span<const double> x, double strength, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xa097);
  return augment(x, strength, rng);
}

double draw_beta(double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  return a + b > 0.0 ? a / (a + b) : 0.5;
}

MixupSample mixup(std::span<const double> x_i, std::span<const double> label_i,
                  std::span<const double> x_j, std::span<const double> label_j, double alpha,
                  Rng& rng, std::optional<double> forced_beta) {
  if (!(alpha > 0.0)) throw InputError("mixup alpha must be positive");
  if (x_i.size() != x_j.size() || label_i.size() != label_j.size()) {
    throw InputError("mixup operands have mismatched shapes");
  }
  const double beta = forced_beta ? *forced_beta : draw_beta(alpha, rng);
  MixupSample m{Vec(x_i.size()), Vec(label_i.size()), beta};
  for (std::size_t k = 0; k < x_i.size(); ++k) m.x[k] = beta * x_i[k] + (1.0 - beta) * x_j[k];
  for (std::size_t k = 0; k < label_i.size(); ++k) {
    m.y[k] = beta * label_i[k] + (1.0 - beta) * label_j[k];
  }
  return m;
}

}  // namespace metaval
