#pragma once

#include "poer/common.hpp"
#include "poer/energy.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace poer {

/// Features paired with category and domain labels.
struct LabeledFeatureBatch {
  FeatureBatch features;
  std::vector<int> categories;
  std::vector<int> domains;

  /// Checks equal lengths and 0 <= label < bound.
  void validate(int num_categories, int num_domains) const;
};

/// Partition of every non-anchor index of a batch by its relation to the anchor.
struct RelationGroups {
  struct Anchor {
    std::vector<std::size_t> same_cat_same_dom;   // SS, excludes the anchor
    std::vector<std::size_t> same_cat_other_dom;  // SD
    std::vector<std::size_t> other_cat_same_dom;  // DS
    std::vector<std::size_t> other_cat_other_dom; // DD

    bool rank_valid() const {
      return !same_cat_same_dom.empty() && !same_cat_other_dom.empty() &&
             !other_cat_same_dom.empty() && !other_cat_other_dom.empty();
    }
    bool cluster_valid() const {
      return (!same_cat_same_dom.empty() || !same_cat_other_dom.empty()) &&
             (!other_cat_same_dom.empty() || !other_cat_other_dom.empty());
    }
  };

  std::vector<Anchor> anchors;

  std::size_t batch_size() const { return anchors.size(); }
};

RelationGroups relation_groups(std::span<const int> categories, std::span<const int> domains);

struct LossConfig {
  /// Ranking margin delta.
  double margin = 0.0;
  double beta = 1.0;
  /// Bound on the kernel exponent and on the cluster-loss exponent.
  double clamp = 30.0;
  std::vector<std::size_t> rank_blocks{0, 1, 2};
  std::vector<std::size_t> cluster_blocks{3, 4, 5};

  EnergyConfig energy() const { return {beta, clamp}; }
  void validate() const;
};

/// Loss value with its gradient with respect to the feature batch.
struct LossWithGrad {
  double value = 0.0;
  Matrix grad;
  /// Smallest distance of any hinge argument, exponent clamp or zero-distance
  /// pair to its non-differentiable point. Used to steer gradient checks.
  double kink_margin = 0.0;
  /// Hinge activity and clamp states, hashed.
  std::uint64_t branch_signature = 0;
  std::size_t valid_anchors = 0;
};

double rank_loss(const FeatureBatch& features, const RelationGroups& groups, const LossConfig& cfg);
LossWithGrad rank_loss_with_grad(const FeatureBatch& features, const RelationGroups& groups,
                                 const LossConfig& cfg);

double cluster_loss(const FeatureBatch& features, const RelationGroups& groups,
                    const LossConfig& cfg);
LossWithGrad cluster_loss_with_grad(const FeatureBatch& features, const RelationGroups& groups,
                                    const LossConfig& cfg);

/// Which regularizer terms are active; used by the loss ablations.
struct PoerTerms {
  bool rank = true;
  bool cluster = true;
};

struct PoerBreakdown {
  double total = 0.0;
  /// One entry per cfg.rank_blocks / cfg.cluster_blocks element, same order.
  /// Disabled terms are reported as 0.
  std::vector<double> rank;
  std::vector<double> cluster;
};

PoerBreakdown poer_loss(std::span<const FeatureBatch> block_features,
                        std::span<const int> categories, std::span<const int> domains,
                        const LossConfig& cfg);

struct PoerWithGrad {
  PoerBreakdown breakdown;
  /// Gradient of breakdown.total per block (zero matrices for unused blocks).
  std::vector<Matrix> block_grads;
  double kink_margin = 0.0;
  std::uint64_t branch_signature = 0;
};

PoerWithGrad poer_loss_with_grad(std::span<const FeatureBatch> block_features,
                                 const RelationGroups& groups, const LossConfig& cfg,
                                 PoerTerms terms = {});

/// Sum of `values` after sorting ascending; independent of input order.
double canonical_sum(std::vector<double>& values);

}  // namespace poer
