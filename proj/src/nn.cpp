#include "fedssl/nn.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fedssl/error.hpp"

namespace fedssl {

MlpSpec MlpSpec::relu_mlp(std::vector<int> widths, bool standardize_hidden,
                          bool normalize_output) {
  MlpSpec spec;
  const std::size_t hidden = widths.size() >= 2 ? widths.size() - 2 : 0;
  spec.widths = std::move(widths);
  spec.activations.assign(hidden, Activation::kRelu);
  spec.standardize_hidden = standardize_hidden;
  spec.normalize_output = normalize_output;
  return spec;
}

void MlpSpec::validate() const {
  require(widths.size() >= 2, ErrorKind::kInvalidArgument, "an MLP needs at least two widths");
  require(widths.back() >= 2, ErrorKind::kInvalidArgument, "embedding width must be at least 2");
  for (int w : widths)
    require(w > 0, ErrorKind::kInvalidArgument, "layer widths must be positive");
  require(activations.size() == widths.size() - 2, ErrorKind::kInvalidArgument,
          "need one activation per hidden layer");
  require(init_gain > 0.0 && std::isfinite(init_gain), ErrorKind::kInvalidArgument,
          "init gain must be positive");
}

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    n += static_cast<std::size_t>(widths[l] + 1) * static_cast<std::size_t>(widths[l + 1]);
  return n;
}

Network::Network(MlpSpec spec, Vector params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  require(static_cast<std::size_t>(params_.size()) == spec_.param_count(),
          ErrorKind::kShapeMismatch,
          "parameter count " + std::to_string(params_.size()) + " does not match spec (" +
              std::to_string(spec_.param_count()) + ")");
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
    offsets_.push_back(off);
    off += static_cast<std::size_t>(spec_.widths[l] + 1) * static_cast<std::size_t>(spec_.widths[l + 1]);
  }
}

Network Network::initialize(MlpSpec spec, Rng& rng) {
  spec.validate();
  Vector params(static_cast<Eigen::Index>(spec.param_count()));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const int fan_in = spec.widths[l];
    const double bound = spec.init_gain / std::sqrt(static_cast<double>(fan_in));
    const Eigen::Index n = static_cast<Eigen::Index>(fan_in + 1) * spec.widths[l + 1];
    for (Eigen::Index i = 0; i < n; ++i) params[pos++] = rng.uniform(-bound, bound);
  }
  return Network(std::move(spec), std::move(params));
}

void Network::set_params(Vector params) {
  require(params.size() == params_.size(), ErrorKind::kShapeMismatch,
          "parameter count does not match network");
  params_ = std::move(params);
  last_.valid = false;
}

Eigen::Map<const Network::RowMajor> Network::weight(std::size_t layer) const {
  return {params_.data() + offsets_[layer], spec_.widths[layer + 1], spec_.widths[layer]};
}

Eigen::Map<const Eigen::RowVectorXd> Network::bias(std::size_t layer) const {
  const std::size_t w = static_cast<std::size_t>(spec_.widths[layer + 1]) *
                        static_cast<std::size_t>(spec_.widths[layer]);
  return {params_.data() + offsets_[layer] + w, spec_.widths[layer + 1]};
}

Matrix Network::forward(const Matrix& batch) {
  Matrix out = forward(batch, last_);
  return out;
}

Matrix Network::infer(const Matrix& batch) const {
  ForwardCache scratch;
  return forward(batch, scratch);
}

Matrix Network::forward(const Matrix& batch, ForwardCache& cache) const {
  require(batch.cols() == spec_.input_width(), ErrorKind::kShapeMismatch,
          "batch width " + std::to_string(batch.cols()) + " does not match network input " +
              std::to_string(spec_.input_width()));
  require(batch.allFinite(), ErrorKind::kNumeric, "non-finite values in network input");

  const std::size_t layers = spec_.layer_count();
  const std::size_t hidden = layers - 1;
  cache = ForwardCache{};
  cache.layer_inputs.reserve(layers);
  cache.activation_inputs.reserve(hidden);
  if (spec_.standardize_hidden) {
    cache.standardized.reserve(hidden);
    cache.inv_std.reserve(hidden);
  }

  Matrix x = batch;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix y = x * weight(l).transpose();
    y.rowwise() += bias(l);
    cache.layer_inputs.push_back(std::move(x));
    if (l == hidden) {
      x = std::move(y);
      break;
    }
    if (spec_.standardize_hidden) {
      const double n = static_cast<double>(y.rows());
      const Eigen::RowVectorXd mean = y.colwise().mean();
      y.rowwise() -= mean;
      const Eigen::RowVectorXd var = y.colwise().squaredNorm() / n;
      const Eigen::RowVectorXd inv = (var.array() + kStandardizeEps).rsqrt().matrix();
      y = y.array().rowwise() * inv.array();
      cache.standardized.push_back(y);
      cache.inv_std.push_back(inv);
    }
    cache.activation_inputs.push_back(y);
    if (spec_.activations[l] == Activation::kRelu) y = y.cwiseMax(0.0);
    x = std::move(y);
  }

  cache.raw_output = x;
  if (spec_.normalize_output) {
    cache.output_norms = x.rowwise().norm();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = cache.output_norms[i];
      if (n > 0.0) {
        x.row(i) /= n;
      } else {
        x.row(i).setZero();
        ++cache.zero_rows;
      }
    }
  }
  cache.valid = true;
  return x;
}

Vector Network::backward(const Matrix& grad_out) const {
  require(last_.valid, ErrorKind::kInvalidArgument, "backward called without a forward pass");
  return backward(last_, grad_out).param_grad;
}

Backprop Network::backward(const ForwardCache& cache, const Matrix& grad_out) const {
  require(cache.valid, ErrorKind::kInvalidArgument, "backward called without a forward pass");
  require(grad_out.rows() == cache.raw_output.rows() && grad_out.cols() == cache.raw_output.cols(),
          ErrorKind::kShapeMismatch, "upstream gradient shape does not match network output");

  Matrix g = grad_out;
  if (spec_.normalize_output) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double n = cache.output_norms[i];
      if (n > 0.0) {
        const Eigen::RowVectorXd y = cache.raw_output.row(i) / n;
        g.row(i) = (g.row(i) - y * y.dot(g.row(i))) / n;
      } else {
        g.row(i).setZero();
      }
    }
  }

  Backprop out;
  out.param_grad = Vector::Zero(params_.size());
  const std::size_t layers = spec_.layer_count();
  for (std::size_t li = layers; li-- > 0;) {
    if (li + 1 < layers) {
      // g is the gradient w.r.t. the activation output of hidden layer li.
      if (spec_.activations[li] == Activation::kRelu)
        g = (cache.activation_inputs[li].array() > 0.0).select(g, 0.0);
      if (spec_.standardize_hidden) {
        const Matrix& y = cache.standardized[li];
        const double n = static_cast<double>(g.rows());
        const Eigen::RowVectorXd mean_g = g.colwise().sum() / n;
        const Eigen::RowVectorXd mean_gy = g.cwiseProduct(y).colwise().sum() / n;
        Matrix centered = g;
        centered.rowwise() -= mean_g;
        centered -= (y.array().rowwise() * mean_gy.array()).matrix();
        g = centered.array().rowwise() * cache.inv_std[li].array();
      }
    }
    const Matrix& x = cache.layer_inputs[li];
    const int in = spec_.widths[li];
    const int outw = spec_.widths[li + 1];
    Eigen::Map<RowMajor> dw(out.param_grad.data() + offsets_[li], outw, in);
    dw = g.transpose() * x;
    Eigen::Map<Eigen::RowVectorXd> db(
        out.param_grad.data() + offsets_[li] + static_cast<std::size_t>(outw) * static_cast<std::size_t>(in),
        outw);
    db = g.colwise().sum();
    g = g * weight(li);
  }
  out.input_grad = std::move(g);
  return out;
}

double OptimizerState::lr_at(std::int64_t t) const {
  require(total_steps > 0, ErrorKind::kInvalidArgument, "total_steps must be positive");
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total_steps)));
}

Vector sgd_step(const Vector& params, const Vector& grad, OptimizerState& opt) {
  require(params.size() == grad.size(), ErrorKind::kShapeMismatch,
          "gradient shape does not match parameters");
  require(opt.step < opt.total_steps, ErrorKind::kInvalidArgument,
          "optimizer step beyond schedule horizon");
  const double lr = opt.lr();
  ++opt.step;
  return params - lr * grad;
}

NamedParams sgd_step(const NamedParams& params, const NamedParams& grad, OptimizerState& opt) {
  check_same_shape(params, grad);
  require(opt.step < opt.total_steps, ErrorKind::kInvalidArgument,
          "optimizer step beyond schedule horizon");
  const double lr = opt.lr();
  ++opt.step;
  NamedParams out;
  for (std::size_t g = 0; g < params.group_count(); ++g) {
    const auto& [name, v] = params.groups()[g];
    out.add(name, v - lr * grad.groups()[g].second);
  }
  return out;
}

}  // namespace fedssl
