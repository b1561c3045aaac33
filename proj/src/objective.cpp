#include "poer/objective.hpp"

#include "poer/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace poer {

BatchObjective evaluate_objective(const Extractor& extractor, std::span<const double> params,
                                  const Matrix& x, std::span<const int> categories,
                                  std::span<const int> domains, const ObjectiveSettings& settings,
                                  bool want_grad) {
  if (!(settings.alpha >= 0.0) || !std::isfinite(settings.alpha)) {
    throw std::invalid_argument("alpha must be finite and >= 0");
  }
  const ForwardPass pass = extractor.forward(params, x);
  const RelationGroups groups = relation_groups(categories, domains);
  const bool use_poer_grad = want_grad && settings.alpha > 0.0;

  BatchObjective out;
  out.kink_margin = std::numeric_limits<double>::infinity();
  std::vector<Matrix> block_grads(extractor.num_blocks());

  if (use_poer_grad) {
    PoerWithGrad pg = poer_loss_with_grad(pass.block_output, groups, settings.loss, settings.terms);
    out.poer = std::move(pg.breakdown);
    out.kink_margin = pg.kink_margin;
    out.branch_signature = pg.branch_signature;
    if (settings.terms.rank || settings.terms.cluster) {
      for (std::size_t b = 0; b < block_grads.size(); ++b) {
        block_grads[b] = settings.alpha * pg.block_grads[b];
      }
      out.poer_applied = true;
    }
  } else {
    settings.loss.validate();
    for (std::size_t b : settings.loss.rank_blocks) {
      const auto& f = pass.block_output.at(b);
      const double v = settings.terms.rank ? rank_loss(f, groups, settings.loss) : 0.0;
      out.poer.rank.push_back(v);
      out.poer.total += v;
    }
    for (std::size_t b : settings.loss.cluster_blocks) {
      const auto& f = pass.block_output.at(b);
      const double v = settings.terms.cluster ? cluster_loss(f, groups, settings.loss) : 0.0;
      out.poer.cluster.push_back(v);
      out.poer.total += v;
    }
  }

  const PrototypeBank bank = extractor.prototypes(params);
  ClassificationGrad cg = classification_loss_with_grad(pass.block_output.back(), categories, bank);
  out.cls = cg.value;
  out.correct = cg.correct;
  out.total = total_loss(out.cls, out.poer.total, settings.alpha);
  out.kink_margin = std::min(out.kink_margin, cg.kink_margin);
  out.branch_signature = fold_branch(out.branch_signature, cg.branch_signature);
  out.branch_signature =
      fold_branch(out.branch_signature, pass.activation_signature(extractor.shape().extractor.nonlinearity));

  if (want_grad) {
    out.grad.assign(extractor.layout().total(), 0.0);
    Matrix& last = block_grads.back();
    if (last.size() == 0) {
      last = cg.feature_grad;
    } else {
      last += cg.feature_grad;
    }
    extractor.backward(params, pass, block_grads, out.grad);
    const ParamSegment& protos = extractor.layout().prototypes();
    for (std::size_t i = 0; i < cg.bank_grad.size(); ++i) out.grad[protos.offset + i] += cg.bank_grad[i];
  }
  return out;
}

GradCheckTarget objective_target(const Extractor& extractor, Matrix x, std::vector<int> categories,
                                 std::vector<int> domains, ObjectiveSettings settings) {
  struct Batch {
    Extractor extractor;
    Matrix x;
    std::vector<int> y;
    std::vector<int> d;
    ObjectiveSettings settings;
  };
  auto batch = std::make_shared<Batch>(
      Batch{extractor, std::move(x), std::move(categories), std::move(domains), std::move(settings)});
  GradCheckTarget target;
  target.evaluate = [batch](std::span<const double> p, std::span<double> grad) {
    BatchObjective obj = evaluate_objective(batch->extractor, p, batch->x, batch->y, batch->d,
                                            batch->settings, !grad.empty());
    if (!grad.empty()) std::copy(obj.grad.begin(), obj.grad.end(), grad.begin());
    return obj.total;
  };
  target.kink_margin = [batch](std::span<const double> p) {
    return evaluate_objective(batch->extractor, p, batch->x, batch->y, batch->d, batch->settings, true)
        .kink_margin;
  };
  target.branch_signature = [batch](std::span<const double> p) {
    return evaluate_objective(batch->extractor, p, batch->x, batch->y, batch->d, batch->settings, true)
        .branch_signature;
  };
  target.name = [batch](std::size_t i) { return batch->extractor.layout().path(i); };
  return target;
}

}  // namespace poer
