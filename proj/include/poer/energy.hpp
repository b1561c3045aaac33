#pragma once

#include "poer/common.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace poer {

/// Settings of the energy kernel E(a, b) = exp(beta * d(a, b)) - 1.
struct EnergyConfig {
  /// Kernel sharpness; 0 makes every pair potential vanish.
  double beta = 1.0;
  /// Upper bound applied to beta * d before exponentiation.
  double clamp = 30.0;

  void validate() const;
};

/// L2 distance between two equal-length finite vectors.
double potential_difference(std::span<const double> a, std::span<const double> b);

/// Gradient of potential_difference with respect to `a`, written to `grad_a`.
/// Defined as zero when the distance is below 1e-12.
void potential_difference_grad(std::span<const double> a, std::span<const double> b,
                               std::span<double> grad_a);

/// exp(min(beta * d, clamp)) - 1.
double pair_potential(std::span<const double> a, std::span<const double> b,
                      const EnergyConfig& cfg = {});

/// Same as pair_potential, and adds dE/da into `grad_a`.
/// The derivative is zero where the exponent is clamped or d < 1e-12.
double pair_potential_grad(std::span<const double> a, std::span<const double> b,
                           const EnergyConfig& cfg, std::span<double> grad_a);

/// Symmetric B x B matrix of pair potentials; the diagonal is exactly zero.
Matrix pairwise_energy_matrix(const FeatureBatch& batch, const EnergyConfig& cfg = {});

/// Builds a batch from row vectors; throws std::invalid_argument when ragged.
FeatureBatch make_feature_batch(const std::vector<std::vector<double>>& rows);

namespace detail {

/// Unchecked kernels shared by the loss code; callers validate shapes.
double squared_distance(const double* a, const double* b, std::size_t m);

/// Energy as a function of a precomputed distance.
inline double energy_of_distance(double d, const EnergyConfig& cfg) {
  return std::expm1(std::min(cfg.beta * d, cfg.clamp));
}

/// dE/dd at distance d (0 when the exponent is clamped).
double energy_slope(double d, const EnergyConfig& cfg);

/// Pairwise L2 distances, computed once per unordered pair so the matrix is
/// bit-symmetric.
Matrix pairwise_distances(const FeatureBatch& batch);

void require_finite(std::span<const double> v, const char* what);

}  // namespace detail

}  // namespace poer
