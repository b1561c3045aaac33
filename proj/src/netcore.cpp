#include "poer/netcore.hpp"

#include "poer/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace poer {

std::string to_string(Nonlinearity n) {
  return n == Nonlinearity::kRelu ? "relu" : "tanh";
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "relu") return Nonlinearity::kRelu;
  if (s == "tanh") return Nonlinearity::kTanh;
  throw std::invalid_argument("unknown nonlinearity '" + s + "' (expected relu or tanh)");
}

void ExtractorConfig::validate() const {
  if (input_dim < 1) throw std::invalid_argument("extractor input_dim must be >= 1");
  if (block_dims.size() < 2) throw std::invalid_argument("extractor needs at least 2 blocks");
  for (std::size_t d : block_dims) {
    if (d < 1) throw std::invalid_argument("extractor block widths must be >= 1");
  }
}

void ModelShape::validate() const {
  extractor.validate();
  if (classes < 2) throw std::invalid_argument("model needs at least 2 classes");
  if (prototypes_per_class < 1) throw std::invalid_argument("model needs at least 1 prototype per class");
}

ParameterLayout::ParameterLayout(const ModelShape& shape) {
  shape.validate();
  std::size_t in = shape.extractor.input_dim;
  for (std::size_t b = 0; b < shape.extractor.block_dims.size(); ++b) {
    const std::size_t out = shape.extractor.block_dims[b];
    segments_.push_back({"block" + std::to_string(b) + ".weight", total_, out, in});
    total_ += out * in;
    segments_.push_back({"block" + std::to_string(b) + ".bias", total_, out, 1});
    total_ += out;
    in = out;
  }
  segments_.push_back({"prototypes", total_, shape.classes * shape.prototypes_per_class, in});
  total_ += segments_.back().size();
}

std::string ParameterLayout::path(std::size_t flat_index) const {
  for (const auto& s : segments_) {
    if (flat_index >= s.offset && flat_index < s.offset + s.size()) {
      const std::size_t local = flat_index - s.offset;
      if (s.cols == 1) return s.name + "[" + std::to_string(local) + "]";
      return s.name + "[" + std::to_string(local / s.cols) + "," + std::to_string(local % s.cols) + "]";
    }
  }
  return "param[" + std::to_string(flat_index) + "]";
}

double ForwardPass::kink_margin(Nonlinearity n) const {
  double margin = std::numeric_limits<double>::infinity();
  if (n != Nonlinearity::kRelu) return margin;
  for (std::size_t b = 0; b + 1 < pre_activation.size(); ++b) {
    margin = std::min(margin, pre_activation[b].cwiseAbs().minCoeff());
  }
  return margin;
}

std::uint64_t ForwardPass::activation_signature(Nonlinearity n) const {
  std::uint64_t h = 0x12345678ULL;
  if (n != Nonlinearity::kRelu) return h;
  for (std::size_t b = 0; b + 1 < pre_activation.size(); ++b) {
    const Matrix& z = pre_activation[b];
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      h = CounterRng::mix64(h ^ (z.data()[i] > 0.0 ? 0x9E37ULL + static_cast<std::uint64_t>(i) : 0ULL));
    }
  }
  return h;
}

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMap segment_matrix(std::span<const double> params, const ParamSegment& s) {
  return ConstMap(params.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                  static_cast<Eigen::Index>(s.cols));
}

ConstVecMap segment_row(std::span<const double> params, const ParamSegment& s) {
  return ConstVecMap(params.data() + s.offset, static_cast<Eigen::Index>(s.size()));
}

}  // namespace

Extractor::Extractor(ModelShape shape) : shape_(std::move(shape)), layout_(shape_) {}

void Extractor::check_params(std::span<const double> params) const {
  if (params.size() != layout_.total()) {
    throw std::invalid_argument("parameter vector has " + std::to_string(params.size()) +
                                " entries, layout expects " + std::to_string(layout_.total()));
  }
}

std::vector<double> Extractor::init_params(std::uint64_t seed) const {
  std::vector<double> params(layout_.total(), 0.0);
  for (std::size_t b = 0; b < num_blocks(); ++b) {
    const ParamSegment& w = layout_.weight(b);
    const bool last = b + 1 == num_blocks();
    const double gain =
        (!last && shape_.extractor.nonlinearity == Nonlinearity::kRelu) ? 2.0 : 1.0;
    const double scale = std::sqrt(gain / static_cast<double>(w.cols));
    CounterRng rng = stream(seed, Stream::kInit, b);
    for (std::size_t i = 0; i < w.size(); ++i) params[w.offset + i] = scale * rng.normal();
  }
  CounterRng rng = stream(seed, Stream::kPrototypes);
  const std::vector<double> protos = PrototypeBank::random_init(
      shape_.classes, shape_.prototypes_per_class, shape_.extractor.feature_dim(), rng);
  std::copy(protos.begin(), protos.end(), params.begin() + static_cast<std::ptrdiff_t>(layout_.prototypes().offset));
  return params;
}

ForwardPass Extractor::forward(std::span<const double> params, const Matrix& x) const {
  check_params(params);
  if (static_cast<std::size_t>(x.cols()) != shape_.extractor.input_dim) {
    throw std::invalid_argument("input width " + std::to_string(x.cols()) + " does not match extractor input_dim " +
                                std::to_string(shape_.extractor.input_dim));
  }
  ForwardPass pass;
  pass.input = x;
  const Matrix* prev = &pass.input;
  pass.pre_activation.reserve(num_blocks());
  pass.block_output.reserve(num_blocks());
  for (std::size_t b = 0; b < num_blocks(); ++b) {
    const auto w = segment_matrix(params, layout_.weight(b));
    const auto bias = segment_row(params, layout_.bias(b));
    Matrix z = (*prev) * w.transpose();
    z.rowwise() += bias;
    Matrix out;
    if (b + 1 == num_blocks()) {
      out = z;
    } else if (shape_.extractor.nonlinearity == Nonlinearity::kRelu) {
      out = z.cwiseMax(0.0);
    } else {
      out = z.array().tanh().matrix();
    }
    pass.pre_activation.push_back(std::move(z));
    pass.block_output.push_back(std::move(out));
    prev = &pass.block_output.back();
  }
  return pass;
}

void Extractor::backward(std::span<const double> params, const ForwardPass& pass,
                         std::span<const Matrix> block_grads, std::span<double> grad) const {
  if (!pass.recorded()) throw StateError("backward called without a recorded forward pass");
  check_params(params);
  if (grad.size() != layout_.total()) throw std::invalid_argument("gradient buffer has wrong size");
  if (block_grads.size() != num_blocks()) {
    throw std::invalid_argument("backward needs one gradient matrix per block");
  }
  const Eigen::Index rows = pass.input.rows();
  Matrix upstream = Matrix::Zero(rows, static_cast<Eigen::Index>(shape_.extractor.feature_dim()));
  for (std::size_t bi = num_blocks(); bi-- > 0;) {
    const Matrix& out = pass.block_output[bi];
    if (block_grads[bi].size() != 0) {
      if (block_grads[bi].rows() != out.rows() || block_grads[bi].cols() != out.cols()) {
        throw std::invalid_argument("block gradient " + std::to_string(bi) + " has wrong shape");
      }
      upstream += block_grads[bi];
    }
    Matrix dz;
    if (bi + 1 == num_blocks()) {
      dz = upstream;
    } else if (shape_.extractor.nonlinearity == Nonlinearity::kRelu) {
      // Subgradient 0 at z == 0.
      dz = (pass.pre_activation[bi].array() > 0.0).select(upstream, 0.0);
    } else {
      dz = upstream.array() * (1.0 - out.array().square());
    }
    const Matrix& in = bi == 0 ? pass.input : pass.block_output[bi - 1];
    const ParamSegment& ws = layout_.weight(bi);
    const ParamSegment& bs = layout_.bias(bi);
    Eigen::Map<Matrix> gw(grad.data() + ws.offset, static_cast<Eigen::Index>(ws.rows),
                          static_cast<Eigen::Index>(ws.cols));
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + bs.offset, static_cast<Eigen::Index>(bs.size()));
    gw.noalias() += dz.transpose() * in;
    gb += dz.colwise().sum();
    if (bi > 0) upstream = dz * segment_matrix(params, ws);
  }
}

PrototypeBank Extractor::prototypes(std::span<const double> params) const {
  check_params(params);
  const ParamSegment& s = layout_.prototypes();
  return PrototypeBank(params.subspan(s.offset, s.size()), shape_.classes,
                       shape_.prototypes_per_class, shape_.extractor.feature_dim());
}

void OptimizerHyper::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and > 0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("moment decay rates must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("optimizer epsilon must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("weight decay must be finite and >= 0");
  }
  if (lr_half_life < 1) throw std::invalid_argument("lr half-life must be >= 1 epoch");
}

ExtractorState ExtractorState::fresh(const ModelShape& shape, std::uint64_t seed) {
  ExtractorState s;
  s.shape = shape;
  s.params = Extractor(shape).init_params(seed);
  s.optimizer.first_moment.assign(s.params.size(), 0.0);
  s.optimizer.second_moment.assign(s.params.size(), 0.0);
  return s;
}

void optimizer_step(ExtractorState& state, std::span<const double> grads,
                    const OptimizerHyper& hyper, double lr) {
  hyper.validate();
  const std::size_t n = state.params.size();
  if (grads.size() != n) throw std::invalid_argument("gradient and parameter sizes differ");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("step learning rate must be finite and >= 0");
  AdamWState& opt = state.optimizer;
  if (opt.first_moment.size() != n) opt.first_moment.assign(n, 0.0);
  if (opt.second_moment.size() != n) opt.second_moment.assign(n, 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grads[i])) {
      throw DivergenceError("non-finite gradient at " + ParameterLayout(state.shape).path(i));
    }
  }

  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double correction1 = 1.0 - std::pow(hyper.beta1, t);
  const double correction2 = 1.0 - std::pow(hyper.beta2, t);
  const double decay = 1.0 - lr * hyper.weight_decay;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    opt.first_moment[i] = hyper.beta1 * opt.first_moment[i] + (1.0 - hyper.beta1) * g;
    opt.second_moment[i] = hyper.beta2 * opt.second_moment[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = opt.first_moment[i] / correction1;
    const double v_hat = opt.second_moment[i] / correction2;
    state.params[i] = state.params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    if (!std::isfinite(state.params[i])) {
      throw DivergenceError("parameter became non-finite at " + ParameterLayout(state.shape).path(i));
    }
  }
}

double lr_schedule(std::size_t epoch, const OptimizerHyper& hyper) {
  hyper.validate();
  return hyper.learning_rate * std::pow(0.5, static_cast<double>(epoch / hyper.lr_half_life));
}

GradCheckReport grad_check(const GradCheckTarget& target, std::vector<double> point,
                           const GradCheckOptions& options) {
  if (!(options.epsilon >= 1e-8 && options.epsilon <= 1e-4)) {
    throw std::invalid_argument("grad_check epsilon must lie in [1e-8, 1e-4]");
  }
  if (!target.evaluate) throw std::invalid_argument("grad_check target has no evaluate function");
  GradCheckReport report;
  CounterRng rng = stream(options.seed, Stream::kGradCheck);
  auto jittered = [&](const std::vector<double>& from) {
    std::vector<double> p = from;
    for (double& v : p) v += options.jitter * rng.normal();
    return p;
  };

  // Move the whole point off known kinks when that is possible; otherwise
  // keep it and screen each coordinate below.
  if (target.kink_margin && target.kink_margin(point) < options.kink_threshold) {
    const std::vector<double> start = point;
    bool cleared = false;
    for (int t = 0; t < options.max_retries && !cleared; ++t) {
      point = jittered(start);
      ++report.retries;
      cleared = target.kink_margin(point) >= options.kink_threshold;
    }
    if (!cleared) point = start;
  }

  std::vector<double> analytic(point.size(), 0.0);
  report.loss = target.evaluate(point, analytic);
  const double floor = options.relative_floor * std::max(1.0, std::abs(report.loss));
  const std::uint64_t base_signature = target.branch_signature ? target.branch_signature(point) : 0;

  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(point.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  }

  // True when moving coordinate i of `at` by +-step changes the branch pattern.
  std::vector<double> probe;
  auto crosses = [&](const std::vector<double>& at, std::uint64_t signature, std::size_t i, double step) {
    if (!target.branch_signature) return false;
    probe = at;
    probe[i] = at[i] + step;
    const bool plus = target.branch_signature(probe) != signature;
    probe[i] = at[i] - step;
    return plus || target.branch_signature(probe) != signature;
  };

  std::vector<double> alt_point;
  std::vector<double> alt_grad;
  for (std::size_t i : coords) {
    if (i >= point.size()) throw std::invalid_argument("grad_check coordinate out of range");
    const std::vector<double>* at = &point;
    const std::vector<double>* grad = &analytic;
    std::uint64_t signature = base_signature;
    bool near_kink = crosses(*at, signature, i, options.kink_threshold);
    for (int t = 0; near_kink && t < options.max_retries; ++t) {
      alt_point = jittered(point);
      alt_grad.assign(point.size(), 0.0);
      target.evaluate(alt_point, alt_grad);
      signature = target.branch_signature(alt_point);
      at = &alt_point;
      grad = &alt_grad;
      ++report.retries;
      near_kink = crosses(*at, signature, i, options.kink_threshold);
    }

    double h = options.epsilon;
    double numeric = 0.0;
    bool straddles = near_kink;
    while (!near_kink && h >= 1e-8 * (1.0 - 1e-12)) {
      if (!crosses(*at, signature, i, h)) {
        probe = *at;
        probe[i] = (*at)[i] + h;
        const double up = target.evaluate(probe, {});
        probe[i] = (*at)[i] - h;
        const double down = target.evaluate(probe, {});
        numeric = (up - down) / (2.0 * h);
        straddles = false;
        break;
      }
      straddles = true;
      h /= 10.0;
    }
    if (straddles) {
      ++report.straddled;
      continue;
    }
    ++report.checked;
    const double a = (*grad)[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (err > options.tolerance) report.flagged.push_back(i);
    if (report.checked == 1 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.worst_path = target.name ? target.name(report.worst_index)
                                  : "param[" + std::to_string(report.worst_index) + "]";
  report.passed = report.flagged.empty() && report.checked > 0;
  return report;
}

}  // namespace poer
