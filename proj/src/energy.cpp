#include "poer/energy.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace poer {

namespace {

constexpr double kZeroDistance = 1e-12;

void require_same_length(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("feature dimension mismatch: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw std::invalid_argument("feature vectors must have length >= 1");
}

}  // namespace

void EnergyConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("energy beta must be finite and >= 0");
  }
  if (!(clamp > 0.0) || !std::isfinite(clamp)) {
    throw std::invalid_argument("energy clamp must be finite and > 0");
  }
}

namespace detail {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + " has non-finite entry");
  }
}

double squared_distance(const double* a, const double* b, std::size_t m) {
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

double energy_slope(double d, const EnergyConfig& cfg) {
  const double arg = cfg.beta * d;
  if (arg >= cfg.clamp) return 0.0;
  return cfg.beta * std::exp(arg);
}

Matrix pairwise_distances(const FeatureBatch& batch) {
  const Eigen::Index n = batch.rows();
  const auto m = static_cast<std::size_t>(batch.cols());
  Matrix dist = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* fi = batch.data() + i * batch.cols();
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = std::sqrt(squared_distance(fi, batch.data() + j * batch.cols(), m));
      dist(i, j) = d;
      dist(j, i) = d;
    }
  }
  return dist;
}

}  // namespace detail

double potential_difference(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b);
  detail::require_finite(a, "feature a");
  detail::require_finite(b, "feature b");
  return std::sqrt(detail::squared_distance(a.data(), b.data(), a.size()));
}

void potential_difference_grad(std::span<const double> a, std::span<const double> b,
                               std::span<double> grad_a) {
  const double d = potential_difference(a, b);
  if (grad_a.size() != a.size()) throw std::invalid_argument("gradient buffer size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    grad_a[i] = d < kZeroDistance ? 0.0 : (a[i] - b[i]) / d;
  }
}

double pair_potential(std::span<const double> a, std::span<const double> b,
                      const EnergyConfig& cfg) {
  cfg.validate();
  return detail::energy_of_distance(potential_difference(a, b), cfg);
}

double pair_potential_grad(std::span<const double> a, std::span<const double> b,
                           const EnergyConfig& cfg, std::span<double> grad_a) {
  cfg.validate();
  const double d = potential_difference(a, b);
  if (grad_a.size() != a.size()) throw std::invalid_argument("gradient buffer size mismatch");
  if (d >= kZeroDistance) {
    const double scale = detail::energy_slope(d, cfg) / d;
    for (std::size_t i = 0; i < a.size(); ++i) grad_a[i] += scale * (a[i] - b[i]);
  }
  return detail::energy_of_distance(d, cfg);
}

Matrix pairwise_energy_matrix(const FeatureBatch& batch, const EnergyConfig& cfg) {
  cfg.validate();
  if (batch.rows() < 1 || batch.cols() < 1) {
    throw std::invalid_argument("pairwise_energy_matrix: empty batch");
  }
  detail::require_finite({batch.data(), static_cast<std::size_t>(batch.size())}, "feature batch");
  Matrix energy = detail::pairwise_distances(batch);
  for (Eigen::Index i = 0; i < energy.rows(); ++i) {
    for (Eigen::Index j = 0; j < energy.cols(); ++j) {
      energy(i, j) = i == j ? 0.0 : detail::energy_of_distance(energy(i, j), cfg);
    }
  }
  return energy;
}

FeatureBatch make_feature_batch(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows.front().empty()) {
    throw std::invalid_argument("feature batch must have at least one non-empty row");
  }
  const std::size_t m = rows.front().size();
  FeatureBatch batch(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m) {
      throw std::invalid_argument("ragged feature batch: row " + std::to_string(i) + " has " +
                                  std::to_string(rows[i].size()) + " entries, expected " +
                                  std::to_string(m));
    }
    for (std::size_t j = 0; j < m; ++j) batch(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return batch;
}

}  // namespace poer
