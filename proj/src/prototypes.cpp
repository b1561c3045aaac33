#include "poer/prototypes.hpp"

#include "poer/energy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace poer {

namespace {
constexpr double kProbabilityFloor = 1e-300;
}

PrototypeBank::PrototypeBank(std::span<const double> data, std::size_t classes,
                             std::size_t per_class, std::size_t dim)
    : data_(data), classes_(classes), per_class_(per_class), dim_(dim) {
  if (classes < 1 || per_class < 1 || dim < 1) {
    throw std::invalid_argument("prototype bank needs classes, per_class and dim >= 1");
  }
  if (data.size() != classes * per_class * dim) {
    throw std::invalid_argument("prototype bank data has " + std::to_string(data.size()) +
                                " entries, expected " + std::to_string(classes * per_class * dim));
  }
  detail::require_finite(data, "prototype bank");
}

std::vector<double> PrototypeBank::random_init(std::size_t classes, std::size_t per_class,
                                               std::size_t dim, CounterRng& rng) {
  std::vector<double> data(classes * per_class * dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : data) v = scale * rng.normal();
  return data;
}

Matrix prototype_distances(std::span<const double> f, const PrototypeBank& bank) {
  if (f.size() != bank.dim()) {
    throw std::invalid_argument("feature has dimension " + std::to_string(f.size()) +
                                ", prototypes have " + std::to_string(bank.dim()));
  }
  detail::require_finite(f, "feature");
  Matrix out(static_cast<Eigen::Index>(bank.classes()), static_cast<Eigen::Index>(bank.per_class()));
  for (std::size_t i = 0; i < bank.classes(); ++i) {
    for (std::size_t j = 0; j < bank.per_class(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::sqrt(detail::squared_distance(f.data(), bank.prototype(i, j).data(), f.size()));
    }
  }
  return out;
}

ClassDistances min_class_distance(const Matrix& distmat) {
  if (distmat.rows() < 1 || distmat.cols() < 1) {
    throw std::invalid_argument("min_class_distance: empty distance matrix");
  }
  ClassDistances out;
  out.distance.resize(static_cast<std::size_t>(distmat.rows()));
  out.nearest.resize(static_cast<std::size_t>(distmat.rows()));
  for (Eigen::Index i = 0; i < distmat.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < distmat.cols(); ++j) {
      if (distmat(i, j) < distmat(i, best)) best = j;
    }
    out.distance[static_cast<std::size_t>(i)] = distmat(i, best);
    out.nearest[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return out;
}

std::vector<double> class_probabilities(std::span<const double> class_distance) {
  if (class_distance.empty()) throw std::invalid_argument("class_probabilities: no classes");
  detail::require_finite(class_distance, "class distances");
  const double shift = *std::min_element(class_distance.begin(), class_distance.end());
  std::vector<double> p(class_distance.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(-(class_distance[i] - shift));
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

double classification_loss(std::span<const double> probabilities, int y) {
  if (y < 0 || static_cast<std::size_t>(y) >= probabilities.size()) {
    throw std::invalid_argument("classification_loss: label " + std::to_string(y) +
                                " out of range for " + std::to_string(probabilities.size()) +
                                " classes");
  }
  return -std::log(std::max(probabilities[static_cast<std::size_t>(y)], kProbabilityFloor));
}

double total_loss(double cls, double poer, double alpha) { return cls + alpha * poer; }

int predict(std::span<const double> f, const PrototypeBank& bank) {
  const ClassDistances cd = min_class_distance(prototype_distances(f, bank));
  const auto it = std::min_element(cd.distance.begin(), cd.distance.end());
  return static_cast<int>(it - cd.distance.begin());
}

ClassificationGrad classification_loss_with_grad(const FeatureBatch& features,
                                                 std::span<const int> labels,
                                                 const PrototypeBank& bank) {
  const auto b = static_cast<std::size_t>(features.rows());
  if (labels.size() != b) throw std::invalid_argument("features and labels differ in length");
  if (b == 0) throw std::invalid_argument("classification loss of an empty batch");
  if (static_cast<std::size_t>(features.cols()) != bank.dim()) {
    throw std::invalid_argument("feature width does not match prototype dimension");
  }
  const std::size_t k = bank.classes();
  const std::size_t m = bank.dim();
  ClassificationGrad out;
  out.feature_grad = Matrix::Zero(features.rows(), features.cols());
  out.bank_grad.assign(bank.data().size(), 0.0);
  out.kink_margin = std::numeric_limits<double>::infinity();
  const double inv_b = 1.0 / static_cast<double>(b);

  std::vector<double> per_sample(b);
  for (std::size_t s = 0; s < b; ++s) {
    const int y = labels[s];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::invalid_argument("label out of range at sample " + std::to_string(s));
    }
    const auto f = row_span(features, static_cast<Eigen::Index>(s));
    const Matrix dist = prototype_distances(f, bank);
    const ClassDistances cd = min_class_distance(dist);
    for (std::size_t j : cd.nearest) out.branch_signature = fold_branch(out.branch_signature, j);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < bank.per_class(); ++j) {
        if (j == cd.nearest[i]) continue;
        out.kink_margin = std::min(out.kink_margin,
                                   dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) -
                                       cd.distance[i]);
      }
      out.kink_margin = std::min(out.kink_margin, cd.distance[i]);
    }
    const std::vector<double> p = class_probabilities(cd.distance);
    const double shift = *std::min_element(cd.distance.begin(), cd.distance.end());
    double z = 0.0;
    for (double d : cd.distance) z += std::exp(-(d - shift));
    // log-sum-exp form of -log p_y.
    per_sample[s] = (cd.distance[static_cast<std::size_t>(y)] - shift) + std::log(z);
    const auto nearest_class = std::min_element(cd.distance.begin(), cd.distance.end()) - cd.distance.begin();
    if (nearest_class == y) ++out.correct;

    for (std::size_t i = 0; i < k; ++i) {
      // d loss / d d_i = [i == y] - p_i
      const double coef = ((static_cast<int>(i) == y ? 1.0 : 0.0) - p[i]) * inv_b;
      const double d = cd.distance[i];
      if (d < 1e-12 || coef == 0.0) continue;
      const auto proto = bank.prototype(i, cd.nearest[i]);
      const std::size_t offset = (i * bank.per_class() + cd.nearest[i]) * m;
      for (std::size_t c = 0; c < m; ++c) {
        const double g = coef * (f[c] - proto[c]) / d;
        out.feature_grad(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) += g;
        out.bank_grad[offset + c] -= g;
      }
    }
  }
  double acc = 0.0;
  for (double v : per_sample) acc += v;
  out.value = acc * inv_b;
  return out;
}

}  // namespace poer
