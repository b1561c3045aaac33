#include "poer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace poer {

void LabeledFeatureBatch::validate(int num_categories, int num_domains) const {
  const auto b = static_cast<std::size_t>(features.rows());
  if (categories.size() != b || domains.size() != b) {
    throw std::invalid_argument("labeled batch: features and label sequences differ in length");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (categories[i] < 0 || categories[i] >= num_categories) {
      throw std::invalid_argument("labeled batch: category label out of range at " + std::to_string(i));
    }
    if (domains[i] < 0 || domains[i] >= num_domains) {
      throw std::invalid_argument("labeled batch: domain label out of range at " + std::to_string(i));
    }
  }
}

void LossConfig::validate() const {
  if (!(margin >= 0.0) || !std::isfinite(margin)) {
    throw std::invalid_argument("loss margin must be finite and >= 0");
  }
  energy().validate();
  if (rank_blocks.empty() || cluster_blocks.empty()) {
    throw std::invalid_argument("rank_blocks and cluster_blocks must both be non-empty");
  }
  for (std::size_t r : rank_blocks) {
    if (std::find(cluster_blocks.begin(), cluster_blocks.end(), r) != cluster_blocks.end()) {
      throw std::invalid_argument("block " + std::to_string(r) +
                                  " is assigned to both rank and cluster losses");
    }
  }
}

double canonical_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc;
}

RelationGroups relation_groups(std::span<const int> categories, std::span<const int> domains) {
  if (categories.size() != domains.size()) {
    throw std::invalid_argument("relation_groups: label sequences differ in length");
  }
  if (categories.size() < 2) {
    throw std::invalid_argument("relation_groups: batch needs at least 2 samples");
  }
  const std::size_t b = categories.size();
  RelationGroups groups;
  groups.anchors.resize(b);
  for (std::size_t x = 0; x < b; ++x) {
    auto& a = groups.anchors[x];
    for (std::size_t j = 0; j < b; ++j) {
      if (j == x) continue;
      const bool same_cat = categories[j] == categories[x];
      const bool same_dom = domains[j] == domains[x];
      if (same_cat && same_dom) {
        a.same_cat_same_dom.push_back(j);
      } else if (same_cat) {
        a.same_cat_other_dom.push_back(j);
      } else if (same_dom) {
        a.other_cat_same_dom.push_back(j);
      } else {
        a.other_cat_other_dom.push_back(j);
      }
    }
  }
  return groups;
}

namespace {

/// Distances, energies and energy slopes for every pair of a batch.
struct PairTables {
  Matrix distance;
  Matrix energy;
  Matrix slope;
  double kink_margin = std::numeric_limits<double>::infinity();
  std::uint64_t saturated = 0;
};

PairTables pair_tables(const FeatureBatch& features, const EnergyConfig& cfg) {
  PairTables t;
  t.distance = detail::pairwise_distances(features);
  const Eigen::Index n = features.rows();
  t.energy = Matrix::Zero(n, n);
  t.slope = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = t.distance(i, j);
      t.energy(i, j) = detail::energy_of_distance(d, cfg);
      t.slope(i, j) = detail::energy_slope(d, cfg);
      t.kink_margin = std::min({t.kink_margin, d, std::abs(cfg.beta * d - cfg.clamp)});
      if (cfg.beta * d >= cfg.clamp) t.saturated = fold_branch(t.saturated, static_cast<std::uint64_t>(i * n + j));
    }
  }
  return t;
}

void check_inputs(const FeatureBatch& features, const RelationGroups& groups,
                  const LossConfig& cfg) {
  cfg.energy().validate();
  if (!(cfg.margin >= 0.0)) throw std::invalid_argument("loss margin must be >= 0");
  if (static_cast<std::size_t>(features.rows()) != groups.batch_size()) {
    throw std::invalid_argument("features and relation groups have different batch sizes");
  }
  if (features.cols() < 1) throw std::invalid_argument("features must have at least one column");
  detail::require_finite({features.data(), static_cast<std::size_t>(features.size())}, "feature batch");
}

double group_mean(const Matrix& energy, std::size_t anchor, const std::vector<std::size_t>& members,
                  std::vector<double>& scratch) {
  scratch.clear();
  for (std::size_t j : members) {
    scratch.push_back(energy(static_cast<Eigen::Index>(anchor), static_cast<Eigen::Index>(j)));
  }
  return canonical_sum(scratch) / static_cast<double>(members.size());
}

/// Adds weight * d mean_G E(f_x, .) / d f to grad, for all members of G.
void scatter_group_grad(const FeatureBatch& f, const PairTables& t, std::size_t x,
                        const std::vector<std::size_t>& members, double weight, Matrix& grad) {
  if (weight == 0.0 || members.empty()) return;
  const double w = weight / static_cast<double>(members.size());
  const auto ix = static_cast<Eigen::Index>(x);
  for (std::size_t j : members) {
    const auto ij = static_cast<Eigen::Index>(j);
    const double d = t.distance(ix, ij);
    if (d < 1e-12) continue;
    const double s = w * t.slope(ix, ij) / d;
    if (s == 0.0) continue;
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
      const double g = s * (f(ix, c) - f(ij, c));
      grad(ix, c) += g;
      grad(ij, c) -= g;
    }
  }
}

std::vector<std::size_t> concat(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> out;
  out.reserve(a.size() + b.size());
  std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

LossWithGrad rank_impl(const FeatureBatch& f, const RelationGroups& groups, const LossConfig& cfg,
                       bool want_grad) {
  check_inputs(f, groups, cfg);
  const PairTables t = pair_tables(f, cfg.energy());
  LossWithGrad out;
  out.kink_margin = t.kink_margin;
  out.branch_signature = t.saturated;
  if (want_grad) out.grad = Matrix::Zero(f.rows(), f.cols());

  struct AnchorTerm {
    std::size_t anchor;
    double value;
    double coef[4];
  };
  std::vector<AnchorTerm> terms;
  std::vector<double> scratch;
  for (std::size_t x = 0; x < groups.batch_size(); ++x) {
    const auto& a = groups.anchors[x];
    if (!a.rank_valid()) continue;
    const double ss = group_mean(t.energy, x, a.same_cat_same_dom, scratch);
    const double sd = group_mean(t.energy, x, a.same_cat_other_dom, scratch);
    const double ds = group_mean(t.energy, x, a.other_cat_same_dom, scratch);
    const double dd = group_mean(t.energy, x, a.other_cat_other_dom, scratch);
    const double h1 = ss - sd + cfg.margin;
    const double h2 = sd - ds + cfg.margin;
    const double h3 = ds - dd + cfg.margin;
    out.kink_margin = std::min({out.kink_margin, std::abs(h1), std::abs(h2), std::abs(h3)});
    // Hinges with argument exactly 0 are inactive.
    const double a1 = h1 > 0.0 ? 1.0 : 0.0;
    const double a2 = h2 > 0.0 ? 1.0 : 0.0;
    const double a3 = h3 > 0.0 ? 1.0 : 0.0;
    out.branch_signature = fold_branch(out.branch_signature, (h1 > 0.0) | (h2 > 0.0) << 1 | (h3 > 0.0) << 2);
    std::vector<double> parts{a1 * h1, a2 * h2, a3 * h3};
    terms.push_back({x, canonical_sum(parts), {a1, a2 - a1, a3 - a2, -a3}});
  }
  if (terms.empty()) {
    throw DegenerateBatchError("rank_loss: no anchor has all four relation groups (SS, SD, DS, DD)");
  }
  out.valid_anchors = terms.size();
  std::vector<double> values;
  values.reserve(terms.size());
  for (const auto& term : terms) values.push_back(term.value);
  const double n_valid = static_cast<double>(terms.size());
  out.value = canonical_sum(values) / n_valid;

  if (want_grad) {
    for (const auto& term : terms) {
      const auto& a = groups.anchors[term.anchor];
      scatter_group_grad(f, t, term.anchor, a.same_cat_same_dom, term.coef[0] / n_valid, out.grad);
      scatter_group_grad(f, t, term.anchor, a.same_cat_other_dom, term.coef[1] / n_valid, out.grad);
      scatter_group_grad(f, t, term.anchor, a.other_cat_same_dom, term.coef[2] / n_valid, out.grad);
      scatter_group_grad(f, t, term.anchor, a.other_cat_other_dom, term.coef[3] / n_valid, out.grad);
    }
  }
  return out;
}

LossWithGrad cluster_impl(const FeatureBatch& f, const RelationGroups& groups,
                          const LossConfig& cfg, bool want_grad) {
  check_inputs(f, groups, cfg);
  const PairTables t = pair_tables(f, cfg.energy());
  LossWithGrad out;
  out.kink_margin = t.kink_margin;
  out.branch_signature = t.saturated;
  if (want_grad) out.grad = Matrix::Zero(f.rows(), f.cols());

  struct AnchorTerm {
    std::size_t anchor;
    double value;
    double slope;  // d value / d (mean_same - mean_diff)
    std::vector<std::size_t> same, diff;
  };
  std::vector<AnchorTerm> terms;
  std::vector<double> scratch;
  for (std::size_t x = 0; x < groups.batch_size(); ++x) {
    const auto& a = groups.anchors[x];
    if (!a.cluster_valid()) continue;
    AnchorTerm term;
    term.anchor = x;
    term.same = concat(a.same_cat_same_dom, a.same_cat_other_dom);
    term.diff = concat(a.other_cat_same_dom, a.other_cat_other_dom);
    const double gap = group_mean(t.energy, x, term.same, scratch) -
                       group_mean(t.energy, x, term.diff, scratch);
    // Symmetric bound keeps the term strictly positive as well as finite.
    const double clamped = std::clamp(gap, -cfg.clamp, cfg.clamp);
    out.kink_margin = std::min({out.kink_margin, std::abs(gap - cfg.clamp), std::abs(gap + cfg.clamp)});
    term.value = std::exp(clamped);
    out.branch_signature = fold_branch(out.branch_signature, gap >= cfg.clamp ? 2 : gap <= -cfg.clamp ? 1 : 0);
    term.slope = (gap > -cfg.clamp && gap < cfg.clamp) ? term.value : 0.0;
    terms.push_back(std::move(term));
  }
  if (terms.empty()) {
    throw DegenerateBatchError(
        "cluster_loss: no anchor has both same-category and different-category partners");
  }
  out.valid_anchors = terms.size();
  std::vector<double> values;
  values.reserve(terms.size());
  for (const auto& term : terms) values.push_back(term.value);
  const double n_valid = static_cast<double>(terms.size());
  out.value = canonical_sum(values) / n_valid;

  if (want_grad) {
    for (const auto& term : terms) {
      scatter_group_grad(f, t, term.anchor, term.same, term.slope / n_valid, out.grad);
      scatter_group_grad(f, t, term.anchor, term.diff, -term.slope / n_valid, out.grad);
    }
  }
  return out;
}

void check_block_index(std::size_t b, std::size_t count) {
  if (b >= count) {
    throw std::invalid_argument("block index " + std::to_string(b) + " out of range for " +
                                std::to_string(count) + " feature blocks");
  }
}

}  // namespace

double rank_loss(const FeatureBatch& features, const RelationGroups& groups, const LossConfig& cfg) {
  return rank_impl(features, groups, cfg, false).value;
}

LossWithGrad rank_loss_with_grad(const FeatureBatch& features, const RelationGroups& groups,
                                 const LossConfig& cfg) {
  return rank_impl(features, groups, cfg, true);
}

double cluster_loss(const FeatureBatch& features, const RelationGroups& groups,
                    const LossConfig& cfg) {
  return cluster_impl(features, groups, cfg, false).value;
}

LossWithGrad cluster_loss_with_grad(const FeatureBatch& features, const RelationGroups& groups,
                                    const LossConfig& cfg) {
  return cluster_impl(features, groups, cfg, true);
}

PoerBreakdown poer_loss(std::span<const FeatureBatch> block_features,
                        std::span<const int> categories, std::span<const int> domains,
                        const LossConfig& cfg) {
  cfg.validate();
  for (std::size_t b : cfg.rank_blocks) check_block_index(b, block_features.size());
  for (std::size_t b : cfg.cluster_blocks) check_block_index(b, block_features.size());
  const RelationGroups groups = relation_groups(categories, domains);
  PoerBreakdown out;
  for (std::size_t b : cfg.rank_blocks) {
    out.rank.push_back(rank_loss(block_features[b], groups, cfg));
    out.total += out.rank.back();
  }
  for (std::size_t b : cfg.cluster_blocks) {
    out.cluster.push_back(cluster_loss(block_features[b], groups, cfg));
    out.total += out.cluster.back();
  }
  return out;
}

PoerWithGrad poer_loss_with_grad(std::span<const FeatureBatch> block_features,
                                 const RelationGroups& groups, const LossConfig& cfg,
                                 PoerTerms terms) {
  cfg.validate();
  for (std::size_t b : cfg.rank_blocks) check_block_index(b, block_features.size());
  for (std::size_t b : cfg.cluster_blocks) check_block_index(b, block_features.size());
  PoerWithGrad out;
  out.kink_margin = std::numeric_limits<double>::infinity();
  out.block_grads.reserve(block_features.size());
  for (const auto& f : block_features) out.block_grads.push_back(Matrix::Zero(f.rows(), f.cols()));

  for (std::size_t b : cfg.rank_blocks) {
    if (!terms.rank) {
      out.breakdown.rank.push_back(0.0);
      continue;
    }
    LossWithGrad r = rank_loss_with_grad(block_features[b], groups, cfg);
    out.breakdown.rank.push_back(r.value);
    out.breakdown.total += r.value;
    out.block_grads[b] += r.grad;
    out.kink_margin = std::min(out.kink_margin, r.kink_margin);
    out.branch_signature = fold_branch(out.branch_signature, r.branch_signature);
  }
  for (std::size_t b : cfg.cluster_blocks) {
    if (!terms.cluster) {
      out.breakdown.cluster.push_back(0.0);
      continue;
    }
    LossWithGrad c = cluster_loss_with_grad(block_features[b], groups, cfg);
    out.breakdown.cluster.push_back(c.value);
    out.breakdown.total += c.value;
    out.block_grads[b] += c.grad;
    out.kink_margin = std::min(out.kink_margin, c.kink_margin);
    out.branch_signature = fold_branch(out.branch_signature, c.branch_signature);
  }
  return out;
}

}  // namespace poer
