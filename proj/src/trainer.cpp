#include "poer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace poer {

TrainConfig TrainConfig::desk_default() {
  TrainConfig c;
  c.epochs = 40;
  c.alpha_switch_epoch = 20;
  c.optimizer.learning_rate = 1e-3;
  c.optimizer.lr_half_life = 20;
  c.loss.beta = 0.02;
  return c;
}

double TrainConfig::alpha_for(std::size_t epoch) const {
  return epoch < alpha_switch_epoch ? alpha_early : alpha_late;
}

std::size_t TrainConfig::burn_in_epochs() const {
  return static_cast<std::size_t>(std::floor(burn_in_fraction * static_cast<double>(epochs)));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 8) throw std::invalid_argument("batch_size must be >= 8");
  if (!(alpha_early >= 0.0) || !(alpha_late >= 0.0) || !std::isfinite(alpha_early) ||
      !std::isfinite(alpha_late)) {
    throw std::invalid_argument("alpha values must be finite and >= 0");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must lie in (0, 1)");
  if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0)) {
    throw std::invalid_argument("burn_in_fraction must lie in [0, 1)");
  }
  if (prototypes_per_class < 1) throw std::invalid_argument("prototypes_per_class must be >= 1");
  extractor.validate();
  loss.validate();
  optimizer.validate();
  for (std::size_t b : loss.rank_blocks) {
    if (b >= extractor.num_blocks()) throw std::invalid_argument("rank block " + std::to_string(b) + " does not exist");
  }
  for (std::size_t b : loss.cluster_blocks) {
    if (b >= extractor.num_blocks()) throw std::invalid_argument("cluster block " + std::to_string(b) + " does not exist");
  }
}

namespace {

ModelShape shape_for(const TrainConfig& config, const DataSplit& train) {
  ModelShape shape;
  shape.extractor = config.extractor;
  shape.extractor.input_dim = static_cast<std::size_t>(train.x.cols());
  shape.classes = static_cast<std::size_t>(train.categories);
  shape.prototypes_per_class = config.prototypes_per_class;
  shape.validate();
  return shape;
}

struct BatchView {
  Matrix x;
  std::vector<int> y;
  std::vector<int> d;
};

BatchView gather(const DataSplit& split, const std::vector<std::size_t>& idx) {
  BatchView b;
  b.x.resize(static_cast<Eigen::Index>(idx.size()), split.x.cols());
  b.y.reserve(idx.size());
  b.d.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    b.x.row(static_cast<Eigen::Index>(i)) = split.x.row(static_cast<Eigen::Index>(idx[i]));
    b.y.push_back(split.y[idx[i]]);
    b.d.push_back(split.d[idx[i]]);
  }
  return b;
}

void require_finite_term(double value, const std::string& term, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(value)) {
    throw DivergenceError("non-finite " + term + " loss at epoch " + std::to_string(epoch) +
                          ", batch " + std::to_string(batch));
  }
}

}  // namespace

ExtractorState initial_state(const TrainConfig& config, const DomainSplits& splits) {
  return ExtractorState::fresh(shape_for(config, splits.train), config.seed);
}

TrainResult train(const TrainConfig& config, const DomainSplits& splits) {
  config.validate();
  if (splits.train.empty()) throw std::invalid_argument("training split is empty");
  if (splits.val.empty()) throw std::invalid_argument("validation split is empty");
  const ModelShape shape = shape_for(config, splits.train);
  const Extractor extractor(shape);
  ExtractorState state = ExtractorState::fresh(shape, config.seed);
  BatchSampler sampler(splits.train, config.batch_size, config.seed);

  TrainResult result;
  MetricsReport& metrics = result.metrics;
  metrics.target_domain = splits.target_domain;
  metrics.seed = config.seed;
  Checkpoint& best = result.checkpoint;
  bool have_best = false;
  const std::size_t burn_in = config.burn_in_epochs();

  ObjectiveSettings settings;
  settings.loss = config.loss;
  settings.terms = config.terms;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config.optimizer);
    settings.alpha = config.alpha_for(epoch);
    EpochRecord record;
    record.learning_rate = lr;
    record.alpha = settings.alpha;
    record.rank.assign(config.loss.rank_blocks.size(), 0.0);
    record.cluster.assign(config.loss.cluster_blocks.size(), 0.0);
    std::size_t seen = 0;
    std::size_t correct = 0;

    const auto batches = sampler.next_epoch();
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const BatchView batch = gather(splits.train, batches[bi]);
      BatchObjective obj = evaluate_objective(extractor, state.params, batch.x, batch.y, batch.d, settings, true);
      require_finite_term(obj.cls, "classification", epoch, bi);
      for (std::size_t r = 0; r < obj.poer.rank.size(); ++r) {
        require_finite_term(obj.poer.rank[r], "rank (block " + std::to_string(config.loss.rank_blocks[r]) + ")", epoch, bi);
      }
      for (std::size_t c = 0; c < obj.poer.cluster.size(); ++c) {
        require_finite_term(obj.poer.cluster[c], "cluster (block " + std::to_string(config.loss.cluster_blocks[c]) + ")", epoch, bi);
      }
      require_finite_term(obj.total, "total", epoch, bi);
      optimizer_step(state, obj.grad, config.optimizer, lr);
      if (obj.poer_applied) ++metrics.poer_gradient_steps;

      metrics.batch_losses.push_back(obj.total);
      record.total += obj.total;
      record.cls += obj.cls;
      for (std::size_t r = 0; r < obj.poer.rank.size(); ++r) record.rank[r] += obj.poer.rank[r];
      for (std::size_t c = 0; c < obj.poer.cluster.size(); ++c) record.cluster[c] += obj.poer.cluster[c];
      seen += batch.y.size();
      correct += obj.correct;
    }
    const double n_batches = static_cast<double>(batches.size());
    record.total /= n_batches;
    record.cls /= n_batches;
    for (double& v : record.rank) v /= n_batches;
    for (double& v : record.cluster) v /= n_batches;
    record.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    record.val_accuracy = evaluate(state, splits.val).accuracy;
    metrics.epochs.push_back(record);

    // Ties keep the earlier epoch.
    if (epoch >= burn_in && (!have_best || record.val_accuracy > best.best_val_accuracy)) {
      have_best = true;
      best.state = state;
      best.rng = sampler.rng_state();
      best.best_val_accuracy = record.val_accuracy;
      best.best_epoch = epoch;
    }
  }
  best.config = config;

  metrics.selected_epoch = best.best_epoch;
  metrics.best_val_accuracy = best.best_val_accuracy;
  metrics.target = evaluate(best.state, splits.test);
  metrics.validation = evaluate(best.state, splits.val);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto* e : {&metrics.target, &metrics.validation}) {
    for (const auto& pd : e->per_domain) {
      sum += pd.accuracy;
      ++n;
    }
  }
  metrics.mean_domain_accuracy = n ? sum / static_cast<double>(n) : 0.0;
  return result;
}

FeatureBatch block_features(const ExtractorState& state, const DataSplit& split, std::size_t block) {
  const Extractor extractor(state.shape);
  if (block >= extractor.num_blocks()) {
    throw std::invalid_argument("block " + std::to_string(block) + " out of range (model has " +
                                std::to_string(extractor.num_blocks()) + " blocks)");
  }
  if (split.empty()) throw std::invalid_argument("split is empty");
  return extractor.forward(state.params, split.x).block_output[block];
}

EvalResult evaluate(const ExtractorState& state, const DataSplit& split) {
  if (split.empty()) throw std::invalid_argument("evaluate: split is empty");
  const Extractor extractor(state.shape);
  const FeatureBatch features = extractor.forward(state.params, split.x).block_output.back();
  const PrototypeBank bank = extractor.prototypes(state.params);
  std::map<int, DomainAccuracy> by_domain;
  EvalResult out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const bool hit = predict(row_span(features, static_cast<Eigen::Index>(i)), bank) == split.y[i];
    auto& da = by_domain[split.d[i]];
    da.domain = split.d[i];
    ++da.count;
    ++out.count;
    if (hit) {
      ++da.correct;
      ++out.correct;
    }
  }
  for (auto& [dom, da] : by_domain) {
    da.accuracy = static_cast<double>(da.correct) / static_cast<double>(da.count);
    out.per_domain.push_back(da);
  }
  out.accuracy = static_cast<double>(out.correct) / static_cast<double>(out.count);
  return out;
}

ConfidenceInterval confidence_interval(std::span<const double> runs) {
  if (runs.size() < 2) throw std::invalid_argument("confidence_interval needs at least 2 runs");
  const double k = static_cast<double>(runs.size());
  double mean = 0.0;
  for (double v : runs) mean += v;
  mean /= k;
  double ss = 0.0;
  for (double v : runs) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (k - 1.0));
  return {mean, 1.96 * sd / std::sqrt(k)};
}

}  // namespace poer
