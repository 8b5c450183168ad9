#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "metaval/linalg.hpp"
#include "metaval/rng.hpp"

namespace metaval {

// Labels are stored as class indices; one_hot() materialises the simplex vector on demand.
// clean_labels may hold the reserved sentinel `num_classes` for open-set outliers.
struct Dataset {
  Matrix features;                // n x d
  std::vector<int> clean_labels;  // hidden: diagnostics and evaluation only
  std::vector<int> observed_labels;
  int num_classes = 0;
  std::vector<bool> openset_mask;

  [[nodiscard]] std::size_t size() const noexcept { return observed_labels.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return features.cols(); }
  [[nodiscard]] int openset_sentinel() const noexcept { return num_classes; }

  // Correctly labelled: observed == clean and not an open-set outlier.
  [[nodiscard]] bool is_clean(std::size_t i) const {
    return !openset_mask[i] && observed_labels[i] == clean_labels[i];
  }
  [[nodiscard]] Vec observed_one_hot(std::size_t i) const;
  [[nodiscard]] std::vector<std::size_t> class_counts() const;  // by observed label
  [[nodiscard]] Dataset subset(std::span<const std::size_t> rows) const;

  // Throws InputError describing the first broken invariant.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

Vec one_hot(int cls, int num_classes);

enum class SyntheticKind { kGaussianBlobs, kSpirals };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::kGaussianBlobs;
  int num_classes = 4;
  std::size_t n_per_class = 100;
  std::size_t dim = 2;
  double spread = 0.3;
};

// Blobs: class c centred at (cos(2 pi c/C), sin(2 pi c/C), 0, ...), isotropic noise `spread`.
// Spirals: one arm per class in the first two coordinates; remaining coordinates are noise.
Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Header f0..f{d-1},label[,clean_label]. C is inferred as max(label)+1 unless given.
Dataset load_csv(const std::filesystem::path& path, std::optional<int> num_classes = std::nullopt);
void write_csv(const Dataset& ds, const std::filesystem::path& path, bool with_clean_label = true);

enum class NoiseKind { kSymmetric, kAsymmetric, kOpenSet };

struct OutlierSpec {
  // Gaussian outliers; the centre sits `displacement` * spread away from every class mean.
  double displacement = 5.0;
  double spread = 0.3;
};

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kSymmetric;
  double rate = 0.0;
  std::vector<int> pair_map;  // asymmetric; empty -> cyclic c -> (c+1) mod C
  OutlierSpec outliers;       // open-set
};

std::vector<int> cyclic_pair_map(int num_classes);

// Flips to a uniformly drawn *different* class.
Dataset inject_symmetric(const Dataset& ds, double rate, std::uint64_t seed);
Dataset inject_asymmetric(const Dataset& ds, double rate, std::span<const int> pair_map,
                          std::uint64_t seed);
Dataset inject_openset(const Dataset& ds, double rate, const OutlierSpec& outliers,
                       std::uint64_t seed);
Dataset inject_noise(const Dataset& ds, const NoiseSpec& spec, std::uint64_t seed);

struct ImbalanceSpec {
  double ratio = 1.0;  // n_max / n_min under an exponential profile
};

// Target size of class c: round(n_max * ratio^(-c/(C-1))).
std::vector<std::size_t> longtail_sizes(std::size_t n_max, int num_classes, double ratio);
// n_max is the largest observed class size. Throws SizingError naming the short class.
Dataset apply_longtail(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed);

// x + N(0, strength^2) per coordinate.
Vec augment(std::span<const double> x, double strength, std::uint64_t seed);
Vec augment(std::span<const double> x, double strength, Rng& rng);

struct MixupSample {
  Vec x;
  Vec y;
  double beta;
};

double draw_beta(double alpha, Rng& rng);
// beta ~ Beta(alpha, alpha) unless `forced_beta` is set.
MixupSample mixup(std::span<const double> x_i, std::span<const double> label_i,
                  std::span<const double> x_j, std::span<const double> label_j, double alpha,
                  Rng& rng, std::optional<double> forced_beta = std::nullopt);

}  // namespace metaval
