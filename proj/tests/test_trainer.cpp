#include "poer/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace poer;

namespace {

TrainConfig small_config() {
  TrainConfig c = TrainConfig::desk_default();
  c.epochs = 1;
  c.batch_size = 64;
  c.extractor.block_dims = {8, 8, 6, 4};
  c.loss.rank_blocks = {0, 1};
  c.loss.cluster_blocks = {2, 3};
  c.loss.beta = 0.1;
  c.prototypes_per_class = 2;
  c.burn_in_fraction = 0.0;
  return c;
}

DatasetSpec tiny_spec(int k, int d, int n) {
  DatasetSpec s;
  s.categories = k;
  s.domains = d;
  s.signal_dim = 3;
  s.nuisance_dim = 3;
  s.observed_dim = 6;
  s.samples_per_cell = n;
  s.seed = 11;
  return s;
}

Matrix features_from(const std::vector<std::vector<double>>& rows) {
  Matrix f(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return f;
}

// Exhaustive enumeration of (x; ij, iq, pj, pq) quadruples.
struct AuditOracle {
  std::uint64_t total = 0;
  std::uint64_t violations = 0;
};

AuditOracle audit_oracle(const Matrix& f, const std::vector<int>& y, const std::vector<int>& d, const EnergyConfig& e) {
  AuditOracle out;
  const std::size_t n = y.size();
  auto energy = [&](std::size_t a, std::size_t b) {
    return pair_potential(row_span(f, static_cast<Eigen::Index>(a)), row_span(f, static_cast<Eigen::Index>(b)), e);
  };
  for (std::size_t x = 0; x < n; ++x) {
    for (std::size_t ij = 0; ij < n; ++ij) {
      if (ij == x || y[ij] != y[x] || d[ij] != d[x]) continue;
      for (std::size_t iq = 0; iq < n; ++iq) {
        if (y[iq] != y[x] || d[iq] == d[x]) continue;
        for (std::size_t pj = 0; pj < n; ++pj) {
          if (y[pj] == y[x] || d[pj] != d[x]) continue;
          for (std::size_t pq = 0; pq < n; ++pq) {
            if (y[pq] != y[pj] || d[pq] != d[iq]) continue;
            ++out.total;
            const double e1 = energy(x, ij);
            const double e2 = energy(x, iq);
            const double e3 = energy(x, pj);
            const double e4 = energy(x, pq);
            if (!(e1 < e2 && e2 < e3 && e3 < e4)) ++out.violations;
          }
        }
      }
    }
  }
  return out;
}

// Leading eigenvector by power iteration, for checking the projection axes.
Eigen::VectorXd power_iteration(const Matrix& c) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(c.rows());
  for (int i = 0; i < 5000; ++i) {
    v = c * v;
    v /= v.norm();
  }
  return v;
}

}  // namespace

TEST(TrainConfig, AlphaScheduleAndBurnIn) {
  TrainConfig c;
  EXPECT_EQ(c.alpha_switch_epoch, 70u);
  EXPECT_EQ(c.alpha_for(69), c.alpha_early);
  EXPECT_EQ(c.alpha_for(70), c.alpha_late);
  c.epochs = 40;
  EXPECT_EQ(c.burn_in_epochs(), 4u);
  const TrainConfig desk = TrainConfig::desk_default();
  EXPECT_EQ(desk.alpha_switch_epoch, 20u);
  EXPECT_NO_THROW(desk.validate());
  c.loss.rank_blocks = {9};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Train, OneBatchEpochReplaysByHand) {
  const Dataset data = generate(tiny_spec(2, 3, 10));
  const DomainSplits splits = leave_one_domain_out(data, 2, 0.1, 0);
  ASSERT_EQ(splits.train.size(), 36u);
  const TrainConfig config = small_config();
  const TrainResult result = train(config, splits);
  ASSERT_EQ(result.metrics.batch_losses.size(), 1u);

  ExtractorState state = initial_state(config, splits);
  const Extractor ex(state.shape);
  ObjectiveSettings settings;
  settings.loss = config.loss;
  settings.alpha = config.alpha_for(0);
  const BatchObjective obj = evaluate_objective(ex, state.params, splits.train.x, splits.train.y,
                                                splits.train.d, settings, true);
  optimizer_step(state, obj.grad, config.optimizer, lr_schedule(0, config.optimizer));
  EXPECT_EQ(result.metrics.batch_losses[0], obj.total);
  EXPECT_EQ(result.checkpoint.state.params, state.params);
  EXPECT_EQ(result.checkpoint.state.optimizer.step, 1u);
  EXPECT_EQ(result.checkpoint.best_epoch, 0u);
  EXPECT_EQ(result.metrics.poer_gradient_steps, 1u);
}

TEST(Train, ZeroAlphaAppliesNoRegularizerGradient) {
  const Dataset data = generate(tiny_spec(3, 3, 20));
  const DomainSplits splits = leave_one_domain_out(data, 0, 0.2, 0);
  TrainConfig config = small_config();
  config.epochs = 3;
  config.batch_size = 16;
  config.alpha_early = 0.0;
  config.alpha_late = 0.0;
  const TrainResult r = train(config, splits);
  EXPECT_EQ(r.metrics.poer_gradient_steps, 0u);
  EXPECT_GT(r.metrics.batch_losses.size(), 3u);
  for (const auto& e : r.metrics.epochs) {
    EXPECT_EQ(e.total, e.cls);
    EXPECT_GT(e.rank[0], 0.0);  // still reported
  }
  config.alpha_early = 0.1;
  EXPECT_EQ(train(config, splits).metrics.poer_gradient_steps, r.metrics.batch_losses.size());
}

TEST(Train, DeterministicAndSelectsBestValidationEpoch) {
  const Dataset data = generate(tiny_spec(3, 3, 30));
  const DomainSplits splits = leave_one_domain_out(data, 1, 0.2, 4);
  TrainConfig config = small_config();
  config.epochs = 10;
  config.batch_size = 32;
  config.burn_in_fraction = 0.3;
  const TrainResult a = train(config, splits);
  const TrainResult b = train(config, splits);
  EXPECT_EQ(a.checkpoint.state.params, b.checkpoint.state.params);
  EXPECT_EQ(a.metrics.batch_losses, b.metrics.batch_losses);

  std::size_t best = 3;
  for (std::size_t e = 3; e < a.metrics.epochs.size(); ++e) {
    if (a.metrics.epochs[e].val_accuracy > a.metrics.epochs[best].val_accuracy) best = e;
  }
  EXPECT_EQ(a.metrics.selected_epoch, best);
  EXPECT_EQ(a.metrics.best_val_accuracy, a.metrics.epochs[best].val_accuracy);
  EXPECT_EQ(evaluate(a.checkpoint, splits.val).accuracy, a.metrics.best_val_accuracy);
}

TEST(Train, LossDecreasesOnEasyData) {
  DatasetSpec s = tiny_spec(3, 3, 60);
  s.sigma = 0.3;
  const Dataset data = generate(s);
  const DomainSplits splits = leave_one_domain_out(data, 2, 0.2, 0);
  TrainConfig config = small_config();
  config.epochs = 15;
  config.batch_size = 32;
  const TrainResult r = train(config, splits);
  EXPECT_LT(r.metrics.epochs.back().cls, r.metrics.epochs.front().cls);
  EXPECT_GT(r.metrics.epochs.back().train_accuracy, 0.8);
}

TEST(Train, RejectsEmptySplits) {
  const Dataset data = generate(tiny_spec(2, 3, 10));
  DomainSplits splits = leave_one_domain_out(data, 2, 0.1, 0);
  splits.val = DataSplit{};
  EXPECT_THROW(train(small_config(), splits), std::invalid_argument);
}

TEST(Evaluate, MatchesDirectPrediction) {
  const Dataset data = generate(tiny_spec(3, 3, 15));
  const DataSplit all = as_split(data);
  const DomainSplits splits = leave_one_domain_out(data, 0, 0.2, 0);
  const ExtractorState state = initial_state(small_config(), splits);
  const EvalResult r = evaluate(state, all);
  const Extractor ex(state.shape);
  const Matrix f = ex.forward(state.params, all.x).block_output.back();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (predict(row_span(f, static_cast<Eigen::Index>(i)), ex.prototypes(state.params)) == all.y[i]) ++correct;
  }
  EXPECT_EQ(r.correct, correct);
  EXPECT_EQ(r.count, all.size());
  ASSERT_EQ(r.per_domain.size(), 3u);
  std::size_t sum = 0;
  for (const auto& pd : r.per_domain) {
    EXPECT_EQ(pd.count, 45u);
    sum += pd.correct;
  }
  EXPECT_EQ(sum, correct);
  EXPECT_THROW(evaluate(state, DataSplit{}), std::invalid_argument);
}

TEST(ConfidenceInterval, KnownValues) {
  const std::vector<double> runs{0.8, 0.9};
  const ConfidenceInterval ci = confidence_interval(runs);
  EXPECT_NEAR(ci.mean, 0.85, 1e-15);
  EXPECT_NEAR(ci.half_width, 1.96 * std::sqrt(0.005) / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(ci.half_width, 0.098, 1e-12);
  const std::vector<double> same{0.5, 0.5, 0.5};
  EXPECT_EQ(confidence_interval(same).half_width, 0.0);
  EXPECT_THROW(confidence_interval(std::vector<double>{0.5}), std::invalid_argument);
}

TEST(RankAudit, CountMatchesEnumeration) {
  const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 2, 2};
  const std::vector<int> d{0, 0, 1, 2, 0, 1, 1, 0, 2};
  const Matrix f = Matrix::Zero(9, 1);
  EXPECT_EQ(count_quadruples(y, d), audit_oracle(f, y, d, {}).total);
}

TEST(RankAudit, ExhaustiveMatchesOracle) {
  CounterRng rng(3);
  for (int t = 0; t < 10; ++t) {
    std::vector<int> y;
    std::vector<int> d;
    for (int i = 0; i < 14; ++i) {
      y.push_back(static_cast<int>(rng.below(3)));
      d.push_back(static_cast<int>(rng.below(3)));
    }
    Matrix f(14, 3);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
    const EnergyConfig e{0.5, 30.0};
    const AuditOracle oracle = audit_oracle(f, y, d, e);
    if (oracle.total == 0) {
      EXPECT_THROW(rank_violation_rate(f, y, d, e, 1000000, 0), ConfigError);
      continue;
    }
    const double rate = rank_violation_rate(f, y, d, e, 1000000, 0);
    EXPECT_DOUBLE_EQ(rate, static_cast<double>(oracle.violations) / static_cast<double>(oracle.total));
  }
}

TEST(RankAudit, PerfectOrderingAndDegenerateFeatures) {
  std::vector<std::vector<double>> rows;
  std::vector<int> y;
  std::vector<int> d;
  for (int c = 0; c < 3; ++c) {
    for (int dom = 0; dom < 3; ++dom) {
      for (int k = 0; k < 3; ++k) {
        rows.push_back({10.0 * c + 0.01 * k, 1.0 * dom});
        y.push_back(c);
        d.push_back(dom);
      }
    }
  }
  const Matrix f = features_from(rows);
  const EnergyConfig e{0.1, 30.0};
  EXPECT_EQ(rank_violation_rate(f, y, d, e, 1000000, 0), 0.0);
  EXPECT_EQ(rank_violation_rate(f, y, d, e, 100, 0), 0.0);
  EXPECT_EQ(rank_violation_rate(Matrix::Zero(f.rows(), 2), y, d, e, 1000000, 0), 1.0);
  EXPECT_THROW(rank_violation_rate(f, y, d, e, 0, 0), std::invalid_argument);
}

TEST(RankAudit, SampledRateAgreesWithExhaustive) {
  CounterRng rng(8);
  std::vector<int> y;
  std::vector<int> d;
  for (int i = 0; i < 30; ++i) {
    y.push_back(static_cast<int>(rng.below(3)));
    d.push_back(static_cast<int>(rng.below(3)));
  }
  Matrix f(30, 2);
  for (Eigen::Index i = 0; i < 30; ++i) {
    f(i, 0) = 2.0 * y[static_cast<std::size_t>(i)] + rng.normal();
    f(i, 1) = rng.normal();
  }
  const EnergyConfig e{0.3, 30.0};
  const double exact = rank_violation_rate(f, y, d, e, 100000000, 0);
  const std::size_t budget = 20000;
  const double sampled = rank_violation_rate(f, y, d, e, budget, 1);
  EXPECT_NEAR(sampled, exact, 4.0 * std::sqrt(exact * (1 - exact) / budget));
  EXPECT_EQ(sampled, rank_violation_rate(f, y, d, e, budget, 1));
}

TEST(PrincipalProjection, MatchesPowerIteration) {
  CounterRng rng(2);
  Matrix f(200, 4);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const double a = 3.0 * rng.normal();
    const double b = 1.0 * rng.normal();
    f(i, 0) = a + 0.5 * b;
    f(i, 1) = -a;
    f(i, 2) = b + 0.1 * rng.normal();
    f(i, 3) = 0.05 * rng.normal() + 7.0;
  }
  const Projection p = principal_projection(f);
  const Matrix centered = f.rowwise() - f.colwise().mean();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
  Eigen::VectorXd v1 = power_iteration(cov);
  const double l1 = v1.dot(cov * v1);
  const Matrix deflated = cov - l1 * v1 * v1.transpose();
  Eigen::VectorXd v2 = power_iteration(deflated);
  const double l2 = v2.dot(cov * v2);
  for (Eigen::VectorXd* v : {&v1, &v2}) {
    for (Eigen::Index k = 0; k < v->size(); ++k) {
      if (std::abs((*v)(k)) > 1e-12) {
        if ((*v)(k) < 0) *v = -*v;
        break;
      }
    }
  }
  EXPECT_NEAR(p.variance1, l1, 1e-9 * l1);
  EXPECT_NEAR(p.variance2, l2, 1e-9 * l1);
  EXPECT_LE((p.axes.col(0) - v1).norm(), 1e-8);
  EXPECT_LE((p.axes.col(1) - v2).norm(), 1e-6);
  const Matrix expected = centered * p.axes;
  EXPECT_LE((p.coordinates - expected).cwiseAbs().maxCoeff(), 1e-10);
  // Sample variance of the projected coordinates equals the eigenvalues.
  const Eigen::RowVectorXd var =
      (p.coordinates.rowwise() - p.coordinates.colwise().mean()).colwise().squaredNorm() / 199.0;
  EXPECT_NEAR(var(0), p.variance1, 1e-9 * l1);
  EXPECT_NEAR(var(1), p.variance2, 1e-9 * l1);
  EXPECT_THROW(principal_projection(Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST(DomainProbe, SeparatedAndMixedDomains) {
  CounterRng rng(4);
  Matrix fit(60, 2);
  Matrix test(60, 2);
  std::vector<int> doms;
  for (int i = 0; i < 60; ++i) {
    const int dom = i % 3;
    doms.push_back(dom);
    fit(i, 0) = 10.0 * dom + 0.1 * rng.normal();
    fit(i, 1) = 0.1 * rng.normal();
    test(i, 0) = 10.0 * dom + 0.1 * rng.normal();
    test(i, 1) = 0.1 * rng.normal();
  }
  EXPECT_EQ(domain_probe_accuracy(fit, doms, test, doms), 1.0);
  const std::vector<int> one(60, 0);
  EXPECT_THROW(domain_probe_accuracy(fit, one, test, one), std::invalid_argument);
}

TEST(ExportEmbeddings, RowsCarryLabels) {
  const Dataset data = generate(tiny_spec(2, 3, 10));
  const DomainSplits splits = leave_one_domain_out(data, 2, 0.1, 0);
  Checkpoint ck;
  ck.state = initial_state(small_config(), splits);
  const auto rows = export_embeddings(ck, splits.test, 3);
  ASSERT_EQ(rows.size(), splits.test.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].category, splits.test.y[i]);
    EXPECT_EQ(rows[i].domain, 2);
  }
  EXPECT_THROW(export_embeddings(ck, splits.test, 4), std::invalid_argument);
}
