#pragma once

#include "poer/common.hpp"
#include "poer/losses.hpp"
#include "poer/netcore.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace poer {

struct ObjectiveSettings {
  LossConfig loss;
  PoerTerms terms;
  double alpha = 0.1;
};

/// Total loss cls + alpha * (rank + cluster) of one labeled batch.
struct BatchObjective {
  double total = 0.0;
  double cls = 0.0;
  PoerBreakdown poer;
  /// d total / d params; empty unless requested.
  std::vector<double> grad;
  /// True when regularizer gradients were added (alpha > 0 and a term active).
  bool poer_applied = false;
  std::size_t correct = 0;
  /// Minimum over hinge, clamp and prototype-argmin margins.
  double kink_margin = 0.0;
  std::uint64_t branch_signature = 0;
};

/// Forward through the extractor, rank loss on loss.rank_blocks, cluster loss
/// on loss.cluster_blocks, classification on the last block, and (when
/// `want_grad`) one backward pass. With alpha == 0 the regularizer values are
/// still reported but contribute no gradient.
BatchObjective evaluate_objective(const Extractor& extractor, std::span<const double> params,
                                  const Matrix& x, std::span<const int> categories,
                                  std::span<const int> domains, const ObjectiveSettings& settings,
                                  bool want_grad);

/// Wraps evaluate_objective over a fixed batch for grad_check.
GradCheckTarget objective_target(const Extractor& extractor, Matrix x, std::vector<int> categories,
                                 std::vector<int> domains, ObjectiveSettings settings);

}  // namespace poer
