#pragma once

#include "poer/common.hpp"
#include "poer/prototypes.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace poer {

enum class Nonlinearity { kRelu, kTanh };

std::string to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& s);

/// Fully connected block extractor. Every block but the last applies the
/// nonlinearity; the last block is a plain linear projection and its output is
/// the classification feature.
struct ExtractorConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> block_dims{64, 64, 64, 64, 64, 32};
  Nonlinearity nonlinearity = Nonlinearity::kRelu;

  std::size_t num_blocks() const { return block_dims.size(); }
  std::size_t feature_dim() const { return block_dims.back(); }
  void validate() const;
};

/// Everything that fixes the parameter vector's size and layout.
struct ModelShape {
  ExtractorConfig extractor;
  std::size_t classes = 5;
  std::size_t prototypes_per_class = 3;

  void validate() const;
};

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// Flat parameter vector layout: block weights (out x in, row-major) and
/// biases in block order, then the prototype bank.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelShape& shape);

  const ParamSegment& weight(std::size_t block) const { return segments_[2 * block]; }
  const ParamSegment& bias(std::size_t block) const { return segments_[2 * block + 1]; }
  const ParamSegment& prototypes() const { return segments_.back(); }
  const std::vector<ParamSegment>& segments() const { return segments_; }
  std::size_t total() const { return total_; }

  /// Human-readable path of a flat index, e.g. "block2.weight[3,7]".
  std::string path(std::size_t flat_index) const;

 private:
  std::vector<ParamSegment> segments_;
  std::size_t total_ = 0;
};

/// Intermediates recorded by a forward pass, consumed by backward.
struct ForwardPass {
  Matrix input;
  std::vector<Matrix> pre_activation;
  std::vector<Matrix> block_output;

  bool recorded() const { return !block_output.empty(); }
  /// Smallest |pre-activation| over nonlinear blocks (rectifier only; the
  /// hyperbolic tangent is smooth and reports +inf).
  double kink_margin(Nonlinearity n) const;
  /// Hash of the rectifier activation pattern.
  std::uint64_t activation_signature(Nonlinearity n) const;
};

class Extractor {
 public:
  explicit Extractor(ModelShape shape);

  const ModelShape& shape() const { return shape_; }
  const ParameterLayout& layout() const { return layout_; }
  std::size_t num_blocks() const { return shape_.extractor.num_blocks(); }

  /// Fresh parameters: He-scaled Gaussian weights for nonlinear blocks,
  /// 1/sqrt(fan_in) for the final projection, zero biases, and prototypes
  /// from PrototypeBank::random_init. Deterministic in `seed`.
  std::vector<double> init_params(std::uint64_t seed) const;

  /// Runs all blocks on the rows of `x` (batch x input_dim).
  ForwardPass forward(std::span<const double> params, const Matrix& x) const;

  /// Adds d loss / d params into `grad`, given d loss / d block_output[b] for
  /// every block (empty matrices count as zero).
  void backward(std::span<const double> params, const ForwardPass& pass,
                std::span<const Matrix> block_grads, std::span<double> grad) const;

  PrototypeBank prototypes(std::span<const double> params) const;

 private:
  void check_params(std::span<const double> params) const;

  ModelShape shape_;
  ParameterLayout layout_;
};

struct OptimizerHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  /// Epochs per learning-rate halving.
  std::size_t lr_half_life = 70;

  void validate() const;
};

struct AdamWState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;
};

/// Parameters of the extractor and prototype bank plus optimizer moments.
struct ExtractorState {
  ModelShape shape;
  std::vector<double> params;
  AdamWState optimizer;

  static ExtractorState fresh(const ModelShape& shape, std::uint64_t seed);
};

/// One AdamW update at learning rate `lr`: decoupled decay first
/// (p *= 1 - lr * wd), then the bias-corrected adaptive step.
/// Throws DivergenceError naming the parameter path on a non-finite gradient
/// or parameter.
void optimizer_step(ExtractorState& state, std::span<const double> grads,
                    const OptimizerHyper& hyper, double lr);

/// initial * 0.5^floor(epoch / half_life).
double lr_schedule(std::size_t epoch, const OptimizerHyper& hyper);

/// A scalar function of a flat parameter vector, for finite-difference checks.
struct GradCheckTarget {
  /// Returns the value; fills `grad` with the analytic gradient when non-empty.
  std::function<double(std::span<const double>, std::span<double>)> evaluate;
  /// Distance of the point to the nearest hinge / argmin / clamp kink.
  std::function<double(std::span<const double>)> kink_margin;
  /// Discrete branch pattern (e.g. rectifier activations); a change between
  /// x and x +- h means the stencil straddles a kink.
  std::function<std::uint64_t(std::span<const double>)> branch_signature;
  std::function<std::string(std::size_t)> name;
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// A point within this distance of a kink is jittered and retried: first
  /// the whole point by kink_margin, then per coordinate, where moving the
  /// coordinate by +-kink_threshold must leave the branch signature unchanged.
  double kink_threshold = 1e-3;
  double jitter = 1e-2;
  int max_retries = 50;
  /// Denominator floor, relative to max(1, |loss|).
  double relative_floor = 1e-6;
  std::uint64_t seed = 0;
  /// Check only these coordinates when non-empty.
  std::vector<std::size_t> coordinates;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_path;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<std::size_t> flagged;
  std::size_t checked = 0;
  /// Coordinates whose stencil still straddled a branch change at the
  /// smallest step and were therefore not compared.
  std::size_t straddled = 0;
  int retries = 0;
  double loss = 0.0;
  bool passed = false;
};

/// Central-difference comparison per coordinate. The relative error of a
/// coordinate is |a - n| / max(|a|, |n|, relative_floor * max(1, |loss|)).
/// Coordinates that stay near a kink after max_retries jitters are counted
/// as straddled and not compared.
GradCheckReport grad_check(const GradCheckTarget& target, std::vector<double> point,
                           const GradCheckOptions& options = {});

}  // namespace poer
