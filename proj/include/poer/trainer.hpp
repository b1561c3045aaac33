#pragma once

#include "poer/common.hpp"
#include "poer/losses.hpp"
#include "poer/netcore.hpp"
#include "poer/objective.hpp"
#include "poer/rng.hpp"
#include "poer/synthgen.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace poer {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  double alpha_early = 0.1;
  double alpha_late = 0.2;
  std::size_t alpha_switch_epoch = 70;
  std::uint64_t seed = 0;
  int target_domain = 3;
  double val_fraction = 0.1;
  ExtractorConfig extractor;
  std::size_t prototypes_per_class = 3;
  LossConfig loss;
  PoerTerms terms;
  OptimizerHyper optimizer;
  /// Fraction of epochs skipped before checkpoint selection starts.
  double burn_in_fraction = 0.1;

  /// Settings used by the desk experiments (lr 1e-3, half-life 20,
  /// alpha switch at 20, 40 epochs, beta 0.02).
  static TrainConfig desk_default();

  double alpha_for(std::size_t epoch) const;
  std::size_t burn_in_epochs() const;
  void validate() const;
};

struct DomainAccuracy {
  int domain = 0;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct EvalResult {
  std::vector<DomainAccuracy> per_domain;  // ascending domain order
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct EpochRecord {
  double learning_rate = 0.0;
  double alpha = 0.0;
  double total = 0.0;  // means over the epoch's batches
  double cls = 0.0;
  std::vector<double> rank;
  std::vector<double> cluster;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct MetricsReport {
  int target_domain = 0;
  std::uint64_t seed = 0;
  EvalResult target;      // best checkpoint on the held-out domain
  EvalResult validation;  // best checkpoint on the source validation split
  /// Mean of the per-domain accuracies over the target and validation domains.
  double mean_domain_accuracy = 0.0;
  std::vector<EpochRecord> epochs;
  /// Total loss of every optimizer step, in order.
  std::vector<double> batch_losses;
  std::size_t selected_epoch = 0;
  double best_val_accuracy = 0.0;
  /// Optimizer steps that received regularizer gradients.
  std::size_t poer_gradient_steps = 0;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ExtractorState state;
  TrainConfig config;
  CounterRng::State rng;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  MetricsReport metrics;
};

/// Mini-batch training with validation-based model selection. Throws DivergenceError
/// naming the loss term and batch index on a non-finite loss.
TrainResult train(const TrainConfig& config, const DomainSplits& splits);

/// Model of a fresh, untrained run with the same shape train() would build.
ExtractorState initial_state(const TrainConfig& config, const DomainSplits& splits);

/// Block outputs for every sample of a split (block index < num blocks).
FeatureBatch block_features(const ExtractorState& state, const DataSplit& split, std::size_t block);

EvalResult evaluate(const ExtractorState& state, const DataSplit& split);
inline EvalResult evaluate(const Checkpoint& ck, const DataSplit& split) {
  return evaluate(ck.state, split);
}

struct ConfidenceInterval {
  double mean = 0.0;
  double half_width = 0.0;
};

/// mean +- 1.96 * s / sqrt(k) with the (k - 1)-denominator standard deviation.
ConfidenceInterval confidence_interval(std::span<const double> runs);

/// Fraction of quadruples (x; ij, iq, pj, pq) whose energies around x break
/// E(x,ij) < E(x,iq) < E(x,pj) < E(x,pq). Quadruples are drawn uniformly
/// from all valid ones; when `budget` covers them all they are enumerated.
double rank_violation_rate(const FeatureBatch& features, std::span<const int> categories,
                           std::span<const int> domains, const EnergyConfig& energy,
                           std::size_t budget, std::uint64_t seed);

/// Number of valid quadruples in a labeled set.
std::uint64_t count_quadruples(std::span<const int> categories, std::span<const int> domains);

double rank_violation_audit(const Checkpoint& ck, const DataSplit& split, std::size_t block,
                            std::size_t budget, std::uint64_t seed);

struct EmbeddingRow {
  double pc1 = 0.0;
  double pc2 = 0.0;
  int category = 0;
  int domain = 0;
};

struct Projection {
  Matrix coordinates;  // n x 2
  double variance1 = 0.0;
  double variance2 = 0.0;
  Matrix axes;  // m x 2, unit columns
};

/// Projection on the two leading covariance eigenvectors; each axis is
/// oriented so that its first non-zero coordinate is positive.
Projection principal_projection(const FeatureBatch& features);

std::vector<EmbeddingRow> export_embeddings(const Checkpoint& ck, const DataSplit& split,
                                            std::size_t block);

/// Nearest-domain-centroid probe: centroids from `fit`, accuracy on `test`.
double domain_probe_accuracy(const FeatureBatch& fit_features, std::span<const int> fit_domains,
                             const FeatureBatch& test_features, std::span<const int> test_domains);

}  // namespace poer
