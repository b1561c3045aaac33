#include "poer/trainer.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace poer {

namespace {

using CellMap = std::map<std::pair<int, int>, std::vector<std::size_t>>;

CellMap cells_of(std::span<const int> categories, std::span<const int> domains) {
  if (categories.size() != domains.size()) throw std::invalid_argument("label sequences differ in length");
  CellMap cells;
  for (std::size_t i = 0; i < categories.size(); ++i) cells[{categories[i], domains[i]}].push_back(i);
  return cells;
}

/// One (anchor cell, other category, other domain) combination with its
/// number of quadruples.
struct Combo {
  const std::vector<std::size_t>* same;  // (i, j)
  const std::vector<std::size_t>* sd;    // (i, q)
  const std::vector<std::size_t>* ds;    // (p, j)
  const std::vector<std::size_t>* dd;    // (p, q)
  std::uint64_t count;
};

std::vector<Combo> combos_of(const CellMap& cells) {
  std::vector<Combo> out;
  for (const auto& [ij, same] : cells) {
    if (same.size() < 2) continue;
    for (const auto& [pq, dd] : cells) {
      if (pq.first == ij.first || pq.second == ij.second) continue;
      const auto iq = cells.find({ij.first, pq.second});
      const auto pj = cells.find({pq.first, ij.second});
      if (iq == cells.end() || pj == cells.end()) continue;
      const std::uint64_t n = same.size();
      out.push_back({&same, &iq->second, &pj->second, &dd,
                     n * (n - 1) * iq->second.size() * pj->second.size() * dd.size()});
    }
  }
  return out;
}

}  // namespace

std::uint64_t count_quadruples(std::span<const int> categories, std::span<const int> domains) {
  const CellMap cells = cells_of(categories, domains);
  std::uint64_t total = 0;
  for (const auto& c : combos_of(cells)) total += c.count;
  return total;
}

double rank_violation_rate(const FeatureBatch& features, std::span<const int> categories,
                           std::span<const int> domains, const EnergyConfig& energy,
                           std::size_t budget, std::uint64_t seed) {
  if (static_cast<std::size_t>(features.rows()) != categories.size()) {
    throw std::invalid_argument("features and labels differ in length");
  }
  energy.validate();
  const CellMap cells = cells_of(categories, domains);
  const std::vector<Combo> combos = combos_of(cells);
  std::uint64_t total = 0;
  for (const auto& c : combos) total += c.count;
  if (total == 0) {
    throw ConfigError("audit split lacks a complete category x domain block with >= 2 samples in the anchor cell");
  }
  auto e = [&](std::size_t a, std::size_t b) {
    return detail::energy_of_distance(
        std::sqrt(detail::squared_distance(features.data() + static_cast<Eigen::Index>(a) * features.cols(),
                                           features.data() + static_cast<Eigen::Index>(b) * features.cols(),
                                           static_cast<std::size_t>(features.cols()))),
        energy);
  };
  auto violated = [](double e1, double e2, double e3, double e4) { return !(e1 < e2 && e2 < e3 && e3 < e4); };

  std::uint64_t violations = 0;
  if (budget >= total) {
    for (const auto& c : combos) {
      for (std::size_t x : *c.same) {
        for (std::size_t a : *c.same) {
          if (a == x) continue;
          const double e1 = e(x, a);
          for (std::size_t b : *c.sd) {
            const double e2 = e(x, b);
            for (std::size_t cc : *c.ds) {
              const double e3 = e(x, cc);
              for (std::size_t dd : *c.dd) {
                if (violated(e1, e2, e3, e(x, dd))) ++violations;
              }
            }
          }
        }
      }
    }
    return static_cast<double>(violations) / static_cast<double>(total);
  }

  if (budget == 0) throw std::invalid_argument("audit budget must be >= 1");
  std::vector<std::uint64_t> cumulative;
  cumulative.reserve(combos.size());
  std::uint64_t run = 0;
  for (const auto& c : combos) cumulative.push_back(run += c.count);
  CounterRng rng = stream(seed, Stream::kAudit);
  auto pick = [&rng](const std::vector<std::size_t>& v) { return v[static_cast<std::size_t>(rng.below(v.size()))]; };
  for (std::size_t s = 0; s < budget; ++s) {
    const std::uint64_t r = rng.below(total);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const Combo& c = combos[static_cast<std::size_t>(it - cumulative.begin())];
    const std::size_t xi = static_cast<std::size_t>(rng.below(c.same->size()));
    std::size_t ai = static_cast<std::size_t>(rng.below(c.same->size() - 1));
    if (ai >= xi) ++ai;
    const std::size_t x = (*c.same)[xi];
    const std::size_t a = (*c.same)[ai];
    const std::size_t b = pick(*c.sd);
    const std::size_t cc = pick(*c.ds);
    const std::size_t dd = pick(*c.dd);
    if (violated(e(x, a), e(x, b), e(x, cc), e(x, dd))) ++violations;
  }
  return static_cast<double>(violations) / static_cast<double>(budget);
}

double rank_violation_audit(const Checkpoint& ck, const DataSplit& split, std::size_t block,
                            std::size_t budget, std::uint64_t seed) {
  const FeatureBatch f = block_features(ck.state, split, block);
  return rank_violation_rate(f, split.y, split.d, ck.config.loss.energy(), budget, seed);
}

Projection principal_projection(const FeatureBatch& features) {
  if (features.rows() < 3) throw std::invalid_argument("projection needs at least 3 samples");
  const Eigen::Index m = features.cols();
  const Eigen::RowVectorXd mean = features.colwise().mean();
  const Matrix centered = features.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("covariance eigendecomposition failed");

  Projection out;
  out.axes = Matrix::Zero(m, 2);
  const Eigen::Index available = std::min<Eigen::Index>(2, m);
  for (Eigen::Index k = 0; k < available; ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(m - 1 - k);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (std::abs(v(i)) > 1e-12) {
        if (v(i) < 0.0) v = -v;
        break;
      }
    }
    out.axes.col(k) = v;
  }
  out.coordinates = centered * out.axes;
  out.variance1 = std::max(0.0, solver.eigenvalues()(m - 1));
  out.variance2 = m > 1 ? std::max(0.0, solver.eigenvalues()(m - 2)) : 0.0;
  return out;
}

std::vector<EmbeddingRow> export_embeddings(const Checkpoint& ck, const DataSplit& split,
                                            std::size_t block) {
  const Projection p = principal_projection(block_features(ck.state, split, block));
  std::vector<EmbeddingRow> rows(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    rows[i] = {p.coordinates(static_cast<Eigen::Index>(i), 0), p.coordinates(static_cast<Eigen::Index>(i), 1),
               split.y[i], split.d[i]};
  }
  return rows;
}

double domain_probe_accuracy(const FeatureBatch& fit_features, std::span<const int> fit_domains,
                             const FeatureBatch& test_features, std::span<const int> test_domains) {
  if (static_cast<std::size_t>(fit_features.rows()) != fit_domains.size() ||
      static_cast<std::size_t>(test_features.rows()) != test_domains.size()) {
    throw std::invalid_argument("probe features and labels differ in length");
  }
  if (fit_features.cols() != test_features.cols()) throw std::invalid_argument("probe feature widths differ");
  if (test_domains.empty()) throw std::invalid_argument("probe test set is empty");
  std::map<int, std::pair<Eigen::RowVectorXd, std::size_t>> sums;
  for (std::size_t i = 0; i < fit_domains.size(); ++i) {
    auto [it, inserted] = sums.try_emplace(fit_domains[i], Eigen::RowVectorXd::Zero(fit_features.cols()), 0);
    it->second.first += fit_features.row(static_cast<Eigen::Index>(i));
    ++it->second.second;
  }
  if (sums.size() < 2) throw std::invalid_argument("probe needs at least 2 domains");
  std::vector<int> labels;
  std::vector<Eigen::RowVectorXd> centroids;
  for (auto& [dom, acc] : sums) {
    labels.push_back(dom);
    centroids.push_back(acc.first / static_cast<double>(acc.second));
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_domains.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = (test_features.row(static_cast<Eigen::Index>(i)) - centroids[c]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (labels[best] == test_domains[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_domains.size());
}

}  // namespace poer
