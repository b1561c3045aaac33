#pragma once

#include "poer/common.hpp"
#include "poer/rng.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace poer {

/// Read-only view over k x n x m learnable prototypes stored contiguously,
/// class-major: prototype (i, j) occupies [(i * n + j) * m, (i * n + j + 1) * m).
class PrototypeBank {
 public:
  PrototypeBank(std::span<const double> data, std::size_t classes, std::size_t per_class,
                std::size_t dim);

  std::size_t classes() const { return classes_; }
  std::size_t per_class() const { return per_class_; }
  std::size_t dim() const { return dim_; }

  std::span<const double> prototype(std::size_t cls, std::size_t j) const {
    return data_.subspan((cls * per_class_ + j) * dim_, dim_);
  }
  std::span<const double> data() const { return data_; }

  /// Zero-mean Gaussian entries with standard deviation 1/sqrt(dim).
  static std::vector<double> random_init(std::size_t classes, std::size_t per_class,
                                         std::size_t dim, CounterRng& rng);

 private:
  std::span<const double> data_;
  std::size_t classes_;
  std::size_t per_class_;
  std::size_t dim_;
};

/// classes x per_class matrix of L2 distances from f to every prototype.
Matrix prototype_distances(std::span<const double> f, const PrototypeBank& bank);

struct ClassDistances {
  std::vector<double> distance;
  /// Index of the nearest prototype within each class; ties go to the lowest.
  std::vector<std::size_t> nearest;
};

ClassDistances min_class_distance(const Matrix& distmat);

/// Softmax over negative class distances, shifted by the minimum distance.
std::vector<double> class_probabilities(std::span<const double> class_distance);

/// -log p[y]; a zero probability is floored at 1e-300.
double classification_loss(std::span<const double> probabilities, int y);

/// cls + alpha * poer.
double total_loss(double cls, double poer, double alpha);

/// Index of the nearest class; ties go to the lowest class index.
int predict(std::span<const double> f, const PrototypeBank& bank);

/// Mean classification loss over a batch with gradients.
struct ClassificationGrad {
  double value = 0.0;
  Matrix feature_grad;
  std::vector<double> bank_grad;  // same layout as the bank data
  /// Smallest gap between the nearest and second-nearest prototype of any
  /// class, or smallest feature-prototype distance, over the batch.
  double kink_margin = 0.0;
  /// Hash of the nearest-prototype choices.
  std::uint64_t branch_signature = 0;
  std::size_t correct = 0;
};

ClassificationGrad classification_loss_with_grad(const FeatureBatch& features,
                                                 std::span<const int> labels,
                                                 const PrototypeBank& bank);

}  // namespace poer
