#pragma once

// Small multi-layer perceptrons with hand-written reverse-mode gradients.
//
// Layer l computes  y = x W_l^T + b_l, optionally standardizes every output
// feature over the batch (zero mean, unit variance, eps 1e-5, no affine
// parameters, always batch statistics), then applies the activation. The
// last layer has no activation and may L2-normalize its rows.
//
// Parameters live in one flat vector: for each layer, W_l row-major
// [out x in] followed by b_l [out].

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

#include "fedssl/params.hpp"
#include "fedssl/rng.hpp"

namespace fedssl {

using Matrix = Eigen::MatrixXd;

enum class Activation { kRelu, kIdentity };

inline constexpr double kStandardizeEps = 1e-5;

struct MlpSpec {
  std::vector<int> widths;               // input first, embedding last
  std::vector<Activation> activations;   // one per hidden layer
  bool standardize_hidden = false;
  bool normalize_output = false;
  double init_gain = 1.0;               // init bound is gain/sqrt(fan_in)

  /// widths[0] -> ... -> widths.back() with ReLU on every hidden layer.
  static MlpSpec relu_mlp(std::vector<int> widths, bool standardize_hidden = false,
                          bool normalize_output = false);

  std::size_t layer_count() const { return widths.size() - 1; }
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  std::size_t param_count() const;

  /// Throws ErrorKind::kInvalidArgument when the invariants do not hold.
  void validate() const;

  bool operator==(const MlpSpec&) const = default;
};

/// Activations retained by a forward pass, consumed by backward.
struct ForwardCache {
  std::vector<Matrix> layer_inputs;
  std::vector<Matrix> standardized;            // per hidden layer, if enabled
  std::vector<Eigen::RowVectorXd> inv_std;     // per hidden layer, if enabled
  std::vector<Matrix> activation_inputs;       // per hidden layer
  Matrix raw_output;                           // before L2 normalization
  Eigen::VectorXd output_norms;
  std::size_t zero_rows = 0;
  bool valid = false;
};

struct Backprop {
  Vector param_grad;
  Matrix input_grad;
};

class Network {
 public:
  Network(MlpSpec spec, Vector params);

  /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static Network initialize(MlpSpec spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  const Vector& params() const { return params_; }
  void set_params(Vector params);

  /// Forward pass that retains activations for a later backward(grad).
  Matrix forward(const Matrix& batch);
  Matrix forward(const Matrix& batch, ForwardCache& cache) const;
  /// Forward pass without retaining anything.
  Matrix infer(const Matrix& batch) const;

  /// Gradient w.r.t. params for the retained forward pass.
  Vector backward(const Matrix& grad_out) const;
  Backprop backward(const ForwardCache& cache, const Matrix& grad_out) const;

  /// Output rows of the last forward() whose pre-normalization norm was zero.
  std::size_t last_zero_rows() const { return last_.zero_rows; }

 private:
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> weight(std::size_t layer) const;
  Eigen::Map<const Eigen::RowVectorXd> bias(std::size_t layer) const;

  MlpSpec spec_;
  Vector params_;
  std::vector<std::size_t> offsets_;
  ForwardCache last_;
};

/// Cosine-annealed learning rate: lr(t) = base_lr * 0.5 * (1 + cos(pi t / T)).
struct OptimizerState {
  double base_lr = 0.032;
  std::int64_t total_steps = 1;
  std::int64_t step = 0;

  double lr() const { return lr_at(step); }
  double lr_at(std::int64_t t) const;
};

/// params - lr(t) * grad, then t += 1. Requires t < T.
Vector sgd_step(const Vector& params, const Vector& grad, OptimizerState& opt);
NamedParams sgd_step(const NamedParams& params, const NamedParams& grad, OptimizerState& opt);

}  // namespace fedssl
