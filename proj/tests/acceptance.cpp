#include "poer/energy.hpp"
#include "poer/io.hpp"
#include "poer/losses.hpp"
#include "poer/objective.hpp"
#include "poer/prototypes.hpp"
#include "poer/trainer.hpp"

#include "loss_oracles.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

using namespace poer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string points(double acc) { return fmt("%.2f", 100.0 * acc); }

// ---------------------------------------------------------------------------
// Shared training runs

enum class Variant { kBaseline, kPoer, kAlpha02, kAlpha09, kRankOnly, kClusterOnly };

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "alpha=0";
    case Variant::kPoer: return "PoER (scheduled alpha)";
    case Variant::kAlpha02: return "alpha=0.2";
    case Variant::kAlpha09: return "alpha=0.9";
    case Variant::kRankOnly: return "cls+rank";
    case Variant::kClusterOnly: return "cls+cluster";
  }
  return "?";
}

TrainConfig variant_config(Variant v, std::uint64_t seed, int target) {
  TrainConfig c = TrainConfig::desk_default();
  c.seed = seed;
  c.target_domain = target;
  switch (v) {
    case Variant::kBaseline:
      c.alpha_early = c.alpha_late = 0.0;
      break;
    case Variant::kPoer:
      break;
    case Variant::kAlpha02:
      c.alpha_early = c.alpha_late = 0.2;
      break;
    case Variant::kAlpha09:
      c.alpha_early = c.alpha_late = 0.9;
      break;
    case Variant::kRankOnly:
      c.terms.cluster = false;
      break;
    case Variant::kClusterOnly:
      c.terms.rank = false;
      break;
  }
  return c;
}

class RunCache {
 public:
  const DomainSplits& splits(std::uint64_t seed, int target) {
    const auto key = std::make_pair(seed, target);
    auto it = splits_.find(key);
    if (it == splits_.end()) {
      DatasetSpec spec;
      spec.seed = seed;
      spec.clean_domain = target;
      const TrainConfig c = TrainConfig::desk_default();
      it = splits_.emplace(key, leave_one_domain_out(generate(spec), target, c.val_fraction, seed)).first;
    }
    return it->second;
  }

  const TrainResult& run(Variant v, std::uint64_t seed, int target) {
    const auto key = std::make_tuple(static_cast<int>(v), seed, target);
    auto it = runs_.find(key);
    if (it == runs_.end()) {
      it = runs_.emplace(key, train(variant_config(v, seed, target), splits(seed, target))).first;
    }
    return it->second;
  }

 private:
  std::map<std::pair<std::uint64_t, int>, DomainSplits> splits_;
  std::map<std::tuple<int, std::uint64_t, int>, TrainResult> runs_;
};

constexpr int kSeeds = 5;
constexpr int kDomains = 4;
constexpr int kAblationTarget = 3;

// ---------------------------------------------------------------------------
// 1. Loss values against brute-force enumeration

Outcome criterion_oracle_equivalence() {
  CounterRng rng = CounterRng::derive(101, {1});
  double worst = 0.0;
  int rank_batches = 0;
  int cluster_batches = 0;
  int degenerate_ok = 0;
  int mismatched_errors = 0;
  while (rank_batches < 200 || cluster_batches < 200) {
    const std::size_t b = 4 + rng.below(13);  // 4..16
    const std::size_t m = 1 + rng.below(6);
    const int k = 2 + static_cast<int>(rng.below(3));
    const int d = 2 + static_cast<int>(rng.below(3));
    const double scale = 0.2 + 0.4 * rng.uniform();
    const oracle::RandomBatch batch = oracle::random_batch(rng, b, m, k, d, scale);
    LossConfig cfg;
    cfg.beta = 0.25 + rng.uniform();
    cfg.margin = rng.uniform() < 0.5 ? 0.0 : 0.5 * rng.uniform();
    const RelationGroups groups = relation_groups(batch.y, batch.d);

    const double rank_ref = oracle::oracle_rank(batch, cfg.beta, cfg.margin);
    if (std::isnan(rank_ref)) {
      try {
        rank_loss(batch.f, groups, cfg);
        ++mismatched_errors;
      } catch (const DegenerateBatchError&) {
        ++degenerate_ok;
      }
    } else if (rank_batches < 200) {
      worst = std::max(worst, std::abs(rank_loss(batch.f, groups, cfg) - rank_ref));
      ++rank_batches;
    }
    const double cluster_ref = oracle::oracle_cluster(batch, cfg.beta);
    if (std::isnan(cluster_ref)) {
      try {
        cluster_loss(batch.f, groups, cfg);
        ++mismatched_errors;
      } catch (const DegenerateBatchError&) {
        ++degenerate_ok;
      }
    } else if (cluster_batches < 200) {
      worst = std::max(worst, std::abs(cluster_loss(batch.f, groups, cfg) - cluster_ref));
      ++cluster_batches;
    }
  }
  Outcome o;
  o.pass = worst <= 1e-10 && mismatched_errors == 0;
  o.detail = "max |loss - oracle| " + fmt("%.3g", worst) + " over 200 rank + 200 cluster batches (tol 1e-10); " +
             std::to_string(degenerate_ok) + " degenerate batches rejected, " + std::to_string(mismatched_errors) +
             " accepted";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Full-objective gradient check

Outcome criterion_gradient_suite() {
  double worst = 0.0;
  std::string worst_where;
  std::size_t checked = 0;
  std::size_t straddled = 0;
  int failed_seeds = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DatasetSpec spec;
    spec.seed = 1000 + seed;
    spec.samples_per_cell = 8;
    spec.clean_domain = 3;
    const Dataset data = generate(spec);
    TrainConfig cfg = TrainConfig::desk_default();
    cfg.seed = seed;
    const DomainSplits splits = leave_one_domain_out(data, 3, cfg.val_fraction, seed);
    const ExtractorState state = initial_state(cfg, splits);
    BatchSampler sampler(splits.train, 32, seed);
    const auto idx = sampler.next_epoch().front();
    Matrix x(static_cast<Eigen::Index>(idx.size()), splits.train.x.cols());
    std::vector<int> y;
    std::vector<int> d;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = splits.train.x.row(static_cast<Eigen::Index>(idx[i]));
      y.push_back(splits.train.y[idx[i]]);
      d.push_back(splits.train.d[idx[i]]);
    }
    ObjectiveSettings settings;
    settings.loss = cfg.loss;
    settings.alpha = cfg.alpha_late;
    const Extractor ex(state.shape);

    // A few coordinates from every segment: block weights and biases, prototypes.
    GradCheckOptions options;
    options.seed = seed;
    CounterRng pick = CounterRng::derive(seed, {static_cast<std::uint64_t>(Stream::kGradCheck), 2});
    for (const ParamSegment& s : ex.layout().segments()) {
      for (int j = 0; j < 8; ++j) options.coordinates.push_back(s.offset + pick.below(s.size()));
    }
    const GradCheckReport r = grad_check(objective_target(ex, x, y, d, settings), state.params, options);
    checked += r.checked;
    straddled += r.straddled;
    if (!r.passed) ++failed_seeds;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_where = "seed " + std::to_string(seed) + " " + r.worst_path;
    }
  }
  Outcome o;
  o.pass = failed_seeds == 0 && worst <= 1e-4;
  o.detail = "max relative error " + fmt("%.3g", worst) + " (" + worst_where + ") over 20 seeds, " +
             std::to_string(checked) + " coordinates compared, " + std::to_string(straddled) +
             " left near a kink (tol 1e-4)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Invariants

Outcome criterion_invariants() {
  CounterRng rng = CounterRng::derive(303, {3});
  double worst_sum = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> dist(2 + rng.below(9));
    const double scale = std::pow(10.0, -2.0 + 5.0 * rng.uniform());
    for (double& v : dist) v = scale * std::abs(rng.normal());
    const auto p = class_probabilities(dist);
    worst_sum = std::max(worst_sum, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
  }
  int energy_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 1 + rng.below(8);
    const double scale = std::pow(10.0, -3.0 + 5.0 * rng.uniform());
    std::vector<double> a(m);
    std::vector<double> b(m);
    for (std::size_t i = 0; i < m; ++i) {
      a[i] = scale * rng.normal();
      b[i] = scale * rng.normal();
    }
    const double e = pair_potential(a, b);
    if (e != pair_potential(b, a) || !(e >= 0.0) || pair_potential(a, a) != 0.0) ++energy_bad;
  }
  int rank_bad = 0;
  int cluster_bad = 0;
  int rank_n = 0;
  int cluster_n = 0;
  while (rank_n < 1000 || cluster_n < 1000) {
    const double scale = std::pow(10.0, -3.0 + 5.0 * rng.uniform());
    const oracle::RandomBatch batch =
        oracle::random_batch(rng, 4 + rng.below(29), 1 + rng.below(8), 2 + static_cast<int>(rng.below(4)),
                             2 + static_cast<int>(rng.below(3)), scale);
    LossConfig cfg;
    cfg.beta = 0.01 + 2.0 * rng.uniform();
    cfg.margin = rng.uniform() < 0.5 ? 0.0 : rng.uniform();
    const RelationGroups g = relation_groups(batch.y, batch.d);
    if (rank_n < 1000) {
      try {
        if (!(rank_loss(batch.f, g, cfg) >= 0.0)) ++rank_bad;
        ++rank_n;
      } catch (const DegenerateBatchError&) {
      }
    }
    if (cluster_n < 1000) {
      try {
        const double c = cluster_loss(batch.f, g, cfg);
        if (!(c > 0.0) || !std::isfinite(c)) ++cluster_bad;
        ++cluster_n;
      } catch (const DegenerateBatchError&) {
      }
    }
  }
  Outcome o;
  o.pass = worst_sum <= 1e-9 && energy_bad == 0 && rank_bad == 0 && cluster_bad == 0;
  o.detail = "max |sum p - 1| " + fmt("%.3g", worst_sum) + "; energy violations " + std::to_string(energy_bad) +
             "/1000; rank < 0 " + std::to_string(rank_bad) + "/1000; cluster <= 0 " + std::to_string(cluster_bad) +
             "/1000";
  return o;
}

// ---------------------------------------------------------------------------
// 4. Domain-generalization trend

std::vector<double> target_accuracies(RunCache& cache, Variant v, const std::vector<int>& targets) {
  std::vector<double> acc;
  for (int t : targets) {
    for (std::uint64_t s = 0; s < kSeeds; ++s) acc.push_back(cache.run(v, s, t).metrics.target.accuracy);
  }
  return acc;
}

std::string describe(const ConfidenceInterval& ci) { return points(ci.mean) + " +- " + points(ci.half_width); }

Outcome criterion_dg_trend(RunCache& cache) {
  const std::vector<int> targets{0, 1, 2, 3};
  const auto base = target_accuracies(cache, Variant::kBaseline, targets);
  const auto poer = target_accuracies(cache, Variant::kPoer, targets);
  const ConfidenceInterval cb = confidence_interval(base);
  const ConfidenceInterval cp = confidence_interval(poer);
  std::string per_target;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    double b = 0.0;
    double p = 0.0;
    for (int s = 0; s < kSeeds; ++s) {
      b += base[t * kSeeds + static_cast<std::size_t>(s)] / kSeeds;
      p += poer[t * kSeeds + static_cast<std::size_t>(s)] / kSeeds;
    }
    per_target += " t" + std::to_string(targets[t]) + " " + points(p) + "/" + points(b);
  }
  Outcome o;
  const double gain = 100.0 * (cp.mean - cb.mean);
  o.pass = gain >= 2.0;
  o.detail = "PoER " + describe(cp) + " vs alpha=0 " + describe(cb) + " target accuracy (%, 95% CI, 20 runs); gain " +
             fmt("%+.2f", gain) + " pts (need >= 2.00); per target PoER/base:" + per_target;
  return o;
}

// ---------------------------------------------------------------------------
// 5. Ablation directions

double mean_target_accuracy(RunCache& cache, Variant v) {
  double sum = 0.0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) sum += cache.run(v, s, kAblationTarget).metrics.target.accuracy;
  return sum / kSeeds;
}

Outcome criterion_ablations(RunCache& cache) {
  std::map<Variant, double> acc;
  for (Variant v : {Variant::kBaseline, Variant::kAlpha02, Variant::kAlpha09, Variant::kRankOnly,
                    Variant::kClusterOnly, Variant::kPoer}) {
    acc[v] = mean_target_accuracy(cache, v);
  }
  const bool a = acc[Variant::kAlpha02] >= acc[Variant::kBaseline];
  const bool b1 = acc[Variant::kRankOnly] >= acc[Variant::kBaseline];
  const bool b2 = acc[Variant::kClusterOnly] >= acc[Variant::kBaseline];
  const bool b3 = acc[Variant::kPoer] >= std::max(acc[Variant::kRankOnly], acc[Variant::kClusterOnly]);
  std::string detail = "target " + std::to_string(kAblationTarget) + ", mean over 5 seeds:";
  for (const auto& [v, value] : acc) detail += std::string(" ") + variant_name(v) + " " + points(value) + ";";
  detail += std::string(" (a) alpha=0.2 >= alpha=0 ") + (a ? "yes" : "NO") + ", (b) rank >= cls " + (b1 ? "yes" : "NO") +
            ", cluster >= cls " + (b2 ? "yes" : "NO") + ", full >= singles " + (b3 ? "yes" : "NO");
  return {a && b1 && b2 && b3, detail};
}

// ---------------------------------------------------------------------------
// 6. Progressive filtering

Outcome criterion_progressive_filtering(RunCache& cache) {
  const DomainSplits& splits = cache.splits(0, kAblationTarget);
  const TrainResult& r = cache.run(Variant::kPoer, 0, kAblationTarget);
  Checkpoint init;
  init.state = initial_state(r.checkpoint.config, splits);
  const double before = rank_violation_audit(init, splits.val, 0, 10000, 0);
  const double after = rank_violation_audit(r.checkpoint, splits.val, 0, 10000, 0);

  const std::size_t last = r.checkpoint.state.shape.extractor.num_blocks() - 1;
  auto probe = [&](std::size_t block) {
    return domain_probe_accuracy(block_features(r.checkpoint.state, splits.train, block), splits.train.d,
                                 block_features(r.checkpoint.state, splits.val, block), splits.val.d);
  };
  const double chance = 1.0 / (kDomains - 1);
  const double probe_first = probe(0);
  const double probe_last = probe(last);
  const double gap_first = std::abs(probe_first - chance);
  const double gap_last = std::abs(probe_last - chance);
  const bool a = after < before;
  const bool b = gap_first - gap_last >= 0.15;
  Outcome o;
  o.pass = a && b;
  o.detail = "(a) block-0 violation rate " + fmt("%.4f", before) + " at init -> " + fmt("%.4f", after) +
             " selected " + (a ? "(lower)" : "(NOT lower)") + "; (b) domain probe block 0 " + points(probe_first) +
             "%, last block " + points(probe_last) + "%, chance " + points(chance) + "%, last block " +
             fmt("%.2f", 100.0 * (gap_first - gap_last)) + " pts closer to chance (need >= 15)";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Determinism and round trip

Outcome criterion_determinism(RunCache& cache) {
  const DomainSplits& splits = cache.splits(2, 1);
  const TrainConfig cfg = variant_config(Variant::kPoer, 2, 1);
  const TrainResult a = train(cfg, splits);
  const TrainResult b = train(cfg, splits);
  const std::string ck_a = serialize_checkpoint(a.checkpoint);
  const std::string ck_b = serialize_checkpoint(b.checkpoint);
  const std::string m_a = metrics_to_json(a.metrics, cfg).dump(2);
  const std::string m_b = metrics_to_json(b.metrics, cfg).dump(2);
  const std::string again = serialize_checkpoint(parse_checkpoint(ck_a));
  Outcome o;
  o.pass = ck_a == ck_b && m_a == m_b && again == ck_a;
  o.detail = std::string("checkpoints ") + (ck_a == ck_b ? "identical" : "DIFFER") + " (" +
             std::to_string(ck_a.size()) + " bytes), metrics " + (m_a == m_b ? "identical" : "DIFFER") +
             ", save->load->save " + (again == ck_a ? "identical" : "DIFFERS");
  return o;
}

// ---------------------------------------------------------------------------
// 8. Confidence interval formula

Outcome criterion_ci_formula() {
  struct Case {
    std::vector<double> runs;
    double mean;
    double half_width;
  };
  // Hand-computed: half width = 1.96 * s / sqrt(k), s with k - 1 in the denominator.
  const std::vector<Case> cases{
      {{0.8, 0.9}, 0.85, 0.098},
      {{1.0, 2.0, 3.0, 4.0}, 2.5, 1.2651745597610895},
      {{0.5, 0.5, 0.5}, 0.5, 0.0},
      {{0.62, 0.71, 0.68, 0.75, 0.66}, 0.684, 0.04320899906269524},
  };
  double worst = 0.0;
  for (const Case& c : cases) {
    const ConfidenceInterval ci = confidence_interval(c.runs);
    worst = std::max({worst, std::abs(ci.mean - c.mean), std::abs(ci.half_width - c.half_width)});
  }
  return {worst <= 1e-12, "max deviation from hand-computed mean/half-width " + fmt("%.3g", worst) +
                              " over 4 vectors (tol 1e-12)"};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the PoER implementation"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-8)");
  CLI11_PARSE(app, argc, argv);

  RunCache cache;
  const std::vector<Criterion> criteria{
      {1, "loss oracle equivalence", 10, criterion_oracle_equivalence},
      {2, "gradient suite", 60, criterion_gradient_suite},
      {3, "probability/energy invariants", 10, criterion_invariants},
      {4, "domain-generalization trend", 600, [&] { return criterion_dg_trend(cache); }},
      {5, "ablation trends", 1200, [&] { return criterion_ablations(cache); }},
      {6, "progressive filtering", 300, [&] { return criterion_progressive_filtering(cache); }},
      {7, "determinism and round trip", 120, [&] { return criterion_determinism(cache); }},
      {8, "confidence interval formula", 10, criterion_ci_formula},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = seconds <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << fmt("%.1f", seconds) << " s, limit " << fmt("%.0f", c.limit_seconds) << " s"
              << (in_time ? "" : ", OVER TIME") << "]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
