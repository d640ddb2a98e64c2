#pragma once

#include "mtl/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtl {

/// Primitive operations a tape can record.
///
/// The first group is what models are written in. The second group exists
/// so that every backward rule is itself expressed in recorded primitives,
/// which is what lets a gradient be differentiated again.
enum class OpKind : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Add,
  Scale,
  Relu,
  Conv2d,
  Mean,
  SoftmaxCrossEntropy,
  MaxPool,
  BiasAdd,
  Reshape,
  // backward machinery
  Sub,
  Mul,
  MulScalar,
  Transpose,
  Sum,
  Fill,
  ReluMask,
  ChannelSum,
  ChannelBroadcast,
  RowSumBroadcast,
  Softmax,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  MaxPoolScatter,
  MaxPoolGather,
};

std::string_view op_name(OpKind kind);

/// Non-tensor operands of an op.
struct OpAttrs {
  double factor = 0.0;      // Scale
  Shape shape;              // Fill, Reshape, ChannelBroadcast, conv grad output shape
  std::vector<int> labels;  // SoftmaxCrossEntropy
  Index stride = 1;         // conv family
  Index padding = 0;
};

struct Node {
  OpKind kind;
  std::vector<std::size_t> inputs;
  OpAttrs attrs;
  Tensor value;
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of primitive ops in execution order.
///
/// Nodes are only ever appended, so every node's inputs precede it. A tape
/// is pinned in memory because the Vars it hands out point back at it, and
/// node values keep their address for the tape's lifetime.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  /// Evaluates `kind` on `inputs` and appends the node. Throws
  /// std::invalid_argument on bad shapes and std::domain_error if the result
  /// is not finite.
  Var record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});
  Var record(OpKind kind, std::initializer_list<Var> inputs, OpAttrs attrs = {}) {
    return record(kind, std::span<const Var>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const std::deque<Node>& nodes() const { return nodes_; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  Var var(std::size_t id);

  /// Recomputes every non-leaf node from the stored leaves and constants.
  std::vector<Tensor> replay() const;

  /// One line per node: id, op, inputs, shape.
  std::string dump() const;

 private:
  std::deque<Node> nodes_;
};

/// Evaluates a single primitive. Shared by recording and replay.
Tensor evaluate_op(OpKind kind, std::span<const Tensor* const> inputs, const OpAttrs& attrs);

// Model-level ops.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var conv2d(Var input, Var weight, Index stride = 1, Index padding = 0);
Var mean(Var a);
/// Mean over the batch of per-row cross-entropy, via log-sum-exp.
Var softmax_cross_entropy(Var logits, std::vector<int> labels);
/// 2x2 max pooling with stride 2 over the last two axes of NCHW input.
Var max_pool2d(Var input);
/// Adds `bias` along axis 1 (features for 2-D, channels for NCHW).
Var bias_add(Var input, Var bias);
Var reshape(Var a, Shape shape);

// Backward-rule ops.
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var mul_scalar(Var a, Var s);
Var transpose(Var a);
Var sum(Var a);
Var fill(Var s, Shape shape);
Var relu_mask(Var value, Var key);
Var channel_sum(Var a);
Var channel_broadcast(Var b, Shape shape);
Var row_sum_broadcast(Var a);
Var softmax(Var a);
Var conv2d_input_grad(Var grad_out, Var weight, Shape input_shape, Index stride, Index padding);
Var conv2d_weight_grad(Var input, Var grad_out, Shape weight_shape, Index stride, Index padding);
Var max_pool_scatter(Var grad_out, Var key);
Var max_pool_gather(Var value, Var key);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Gradients of a scalar `loss` with respect to `wrt`, recorded on the same
/// tape so they can themselves be differentiated. Targets may be any node
/// preceding the loss; targets the loss does not depend on get zeros.
std::vector<Var> gradients(Var loss, std::span<const Var> wrt);

/// leaf id -> gradient value.
class GradientMap {
 public:
  void insert(std::size_t id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }
  const Tensor& at(Var v) const { return grads_.at(v.id()); }
  const Tensor& at(std::size_t id) const { return grads_.at(id); }
  bool contains(std::size_t id) const { return grads_.contains(id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::size_t, Tensor> grads_;
};

GradientMap backward(Tape& tape, Var loss, std::span<const Var> leaves);

// Finite-difference verification.

/// A scalar function recorded on `tape` from one Var per parameter tensor.
using TapeFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

class ParameterVector;

Vector analytic_gradient(const TapeFunction& f, const ParameterVector& theta);
Vector central_difference_gradient(const TapeFunction& f, const ParameterVector& theta, double eps,
                                   std::span<const Index> coords = {});
/// max_j |a_j - n_j| / max(1, |n_j|).
double max_relative_error(const Vector& analytic, const Vector& numeric);

/// Compares the taped gradient of `f` with central differences. With
/// `max_coords` > 0 only that many evenly spaced coordinates are probed.
double grad_check(const TapeFunction& f, const ParameterVector& theta, double eps, Index max_coords = 0);

}  // namespace mtl
