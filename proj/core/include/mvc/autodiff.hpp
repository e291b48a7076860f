#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mvc/tensor.hpp"

namespace mvc {

class Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamically built computation graph. `grad` holds
/// dLoss/dvalue once a backward pass reaches the node.
class Node {
 public:
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string label;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), 0.0);
  }
  void zero_grad() { grad.assign(value.data.size(), 0.0); }
};

/// Cheap value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad, std::string name = "");

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  NodePtr node() const { return node_; }
  double scalar() const;

 private:
  NodePtr node_;
};

/// Builds a node for a custom operation. `backward_fn` must accumulate into
/// the parents' grad vectors (call ensure_grad on them first).
Var make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn,
              std::string label);

/// Reverse-mode pass from a scalar root. Throws if the root is not scalar.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
/// Elementwise product with a constant tensor (no gradient into the constant).
Var mul_const(const Var& a, const Tensor& c);
/// Elementwise sum with a constant tensor (used for additive noise).
Var add_const(const Var& a, const Tensor& c);
Var square(const Var& a);
Var abs_value(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var tanh_op(const Var& a);
Var log_op(const Var& a);
Var softplus(const Var& a);
/// Standard normal CDF, elementwise.
Var normal_cdf(const Var& a);
Var clamp_min(const Var& a, double lo);
Var clamp_range(const Var& a, double lo, double hi);

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);

// ---- structured ----
/// NCHW convolution. weight (out_ch, in_ch, K, K), bias (out_ch) or undefined.
Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int padding);
/// Adjoint of conv2d. weight (in_ch, out_ch, K, K); output spatial extent is
/// (in-1)*stride - 2*padding + K + output_padding.
Var conv2d_transpose(const Var& input, const Var& weight, const Var& bias, int stride, int padding,
                     int output_padding = 0);
/// Generalized divisive normalization: out_i = in_i / sqrt(beta_i + sum_j gamma_ij in_j^2).
/// With inverse=true multiplies by the square root instead of dividing.
Var gdn(const Var& input, const Var& beta, const Var& gamma, bool inverse);
/// Channels [from, to) of an NCHW tensor.
Var slice_channels(const Var& a, int from, int to);
/// Expands a length-C vector to shape `like` (NCHW with C channels).
Var broadcast_channel(const Var& param, const Shape& like);

// ---- loss helpers ----
/// Weighted mean of softplus(l) - l*t over all elements (binary cross-entropy
/// with logits). `weights` and `targets` are constants of the logits' shape.
Var bce_with_logits_mean(const Var& logits, const Tensor& targets, const Tensor& weights);
/// Channel-softmax cross-entropy averaged over spatial cells selected by
/// `mask` (B,1,H,W in {0,1}); `onehot` is (B,C,H,W). Returns 0 if the mask is
/// empty.
Var softmax_ce_masked(const Var& logits, const Tensor& onehot, const Tensor& mask);

// ---- parameters ----
/// Trainable tensor. Bounded parameters store an unconstrained raw tensor and
/// expose value = max(raw, t)^2 - pedestal >= lower_bound with
/// t = sqrt(lower_bound + pedestal), pedestal = 2^-36.
class Parameter {
 public:
  Parameter() = default;
  /// Unbounded parameter: value == raw.
  Parameter(std::string name, Tensor init);
  /// Bounded parameter: initial raw chosen so that value() == init.
  Parameter(std::string name, Tensor init, double lower_bound);

  Var value() const;                  // graph view (builds reparam nodes when bounded)
  Tensor materialized_value() const;  // plain forward evaluation
  Var raw() const { return raw_; }
  Tensor& raw_tensor() { return raw_.node()->value; }
  const Tensor& raw_tensor() const { return raw_.node()->value; }
  const std::string& name() const { return name_; }
  bool bounded() const { return bounded_; }
  double lower_bound() const { return lower_bound_; }
  std::int64_t size() const { return raw_.node()->value.size(); }
  void zero_grad() { raw_.node()->zero_grad(); }

  static constexpr double kPedestal = 1.4551915228366852e-11;  // 2^-36

 private:
  std::string name_;
  Var raw_;
  bool bounded_ = false;
  double lower_bound_ = 0.0;
};

// ---- optimizer ----
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Standard Adam with bias correction, acting on parameters' raw tensors.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Parameter*> params, AdamConfig config);

  /// Applies one update; every parameter must have a populated gradient.
  void step();
  void zero_grad();
  long step_count() const { return step_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  long step_ = 0;
};

// ---- gradient checking ----
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  bool finite = true;
  std::string message;
};

/// Compares backprop gradients of a scalar-valued function against central
/// finite differences (h = h_rel * max(1, |x_i|) per element). Relative error
/// is normalized by the largest gradient magnitude seen, floored at 1e-8.
GradCheckReport grad_check(const std::function<Var(const Var&)>& fn, const Tensor& input,
                           double h_rel = 1e-4);

/// Same check for a parameter's raw tensor with the input graph fixed.
GradCheckReport grad_check_param(const std::function<Var()>& fn, Parameter& param,
                                 double h_rel = 1e-4);

}  // namespace mvc
