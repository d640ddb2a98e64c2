#include "mtl/autodiff.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mtl {

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& what, std::span<const Tensor* const> in) {
  std::ostringstream os;
  os << op_name(kind) << ": " << what << " (input shapes";
  for (const Tensor* t : in) os << ' ' << to_string(t->shape());
  os << ')';
  throw std::invalid_argument(os.str());
}

void expect_arity(OpKind kind, std::span<const Tensor* const> in, std::size_t n) {
  if (in.size() != n) shape_error(kind, "expected " + std::to_string(n) + " inputs", in);
}

void expect_rank(OpKind kind, std::span<const Tensor* const> in, std::size_t slot, Index rank) {
  if (in[slot]->rank() != rank) shape_error(kind, "input " + std::to_string(slot) + " must have rank " + std::to_string(rank), in);
}

void expect_same(OpKind kind, std::span<const Tensor* const> in) {
  if (in[0]->shape() != in[1]->shape()) shape_error(kind, "shapes must match", in);
}

struct ConvGeometry {
  Index n, c, h, w;     // input
  Index f, kh, kw;      // weight
  Index oh, ow;         // output
  Index stride, pad;
};

ConvGeometry conv_geometry(OpKind kind, const Shape& input, const Shape& weight, Index stride, Index pad,
                           std::span<const Tensor* const> in) {
  if (input.size() != 4 || weight.size() != 4) shape_error(kind, "conv2d expects NCHW input and FCHW weight", in);
  if (stride < 1 || pad < 0) shape_error(kind, "invalid stride/padding", in);
  ConvGeometry g{input[0], input[1], input[2], input[3], weight[0], weight[2], weight[3], 0, 0, stride, pad};
  if (weight[1] != g.c) shape_error(kind, "weight channel count differs from input", in);
  const Index span_h = g.h + 2 * pad - g.kh;
  const Index span_w = g.w + 2 * pad - g.kw;
  if (span_h < 0 || span_w < 0) shape_error(kind, "kernel larger than padded input", in);
  g.oh = span_h / stride + 1;
  g.ow = span_w / stride + 1;
  return g;
}

// Applies `body(x_index, w_index, y_index)` over every multiply-accumulate of
// a direct convolution, in a fixed index order.
template <typename Body>
void for_each_tap(const ConvGeometry& g, Body&& body) {
  for (Index n = 0; n < g.n; ++n)
    for (Index f = 0; f < g.f; ++f)
      for (Index oy = 0; oy < g.oh; ++oy)
        for (Index ox = 0; ox < g.ow; ++ox) {
          const Index y = ((n * g.f + f) * g.oh + oy) * g.ow + ox;
          for (Index c = 0; c < g.c; ++c)
            for (Index ky = 0; ky < g.kh; ++ky) {
              const Index iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (Index kx = 0; kx < g.kw; ++kx) {
                const Index ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                body(((n * g.c + c) * g.h + iy) * g.w + ix, ((f * g.c + c) * g.kh + ky) * g.kw + kx, y);
              }
            }
        }
}

Shape pooled_shape(OpKind kind, const Tensor& key, std::span<const Tensor* const> in) {
  if (key.rank() != 4 || key.dim(2) < 2 || key.dim(3) < 2) shape_error(kind, "max pooling needs NCHW with H,W >= 2", in);
  return {key.dim(0), key.dim(1), key.dim(2) / 2, key.dim(3) / 2};
}

// For each pooled output position, the flat index of the window maximum in
// `key`. Ties resolve to the first element in row-major window order.
std::vector<Index> pool_argmax(const Tensor& key, const Shape& out) {
  const Index h = key.dim(2), w = key.dim(3);
  std::vector<Index> idx(static_cast<std::size_t>(numel(out)));
  std::size_t o = 0;
  for (Index nc = 0; nc < out[0] * out[1]; ++nc)
    for (Index oy = 0; oy < out[2]; ++oy)
      for (Index ox = 0; ox < out[3]; ++ox) {
        Index best = (nc * h + 2 * oy) * w + 2 * ox;
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx) {
            const Index j = (nc * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (key[j] > key[best]) best = j;
          }
        idx[o++] = best;
      }
  return idx;
}

Tensor softmax_rows(const Tensor& z) {
  Tensor out(z.shape());
  const auto zm = z.matrix();
  auto om = out.matrix();
  for (Index r = 0; r < zm.rows(); ++r) {
    const double m = zm.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < zm.cols(); ++c) {
      om(r, c) = std::exp(zm(r, c) - m);
      total += om(r, c);
    }
    om.row(r) /= total;
  }
  return out;
}

double ordered_sum(const Vector& v) {
  double s = 0.0;
  for (Index i = 0; i < v.size(); ++i) s += v[i];
  return s;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Mean: return "mean";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::MaxPool: return "max_pool2d";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::Reshape: return "reshape";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::MulScalar: return "mul_scalar";
    case OpKind::Transpose: return "transpose";
    case OpKind::Sum: return "sum";
    case OpKind::Fill: return "fill";
    case OpKind::ReluMask: return "relu_mask";
    case OpKind::ChannelSum: return "channel_sum";
    case OpKind::ChannelBroadcast: return "channel_broadcast";
    case OpKind::RowSumBroadcast: return "row_sum_broadcast";
    case OpKind::Softmax: return "softmax";
    case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
    case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::MaxPoolScatter: return "max_pool_scatter";
    case OpKind::MaxPoolGather: return "max_pool_gather";
  }
  return "unknown";
}

Tensor evaluate_op(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      throw std::logic_error("evaluate_op: leaves and constants are not computed");

    case OpKind::MatMul: {
      expect_arity(kind, in, 2);
      expect_rank(kind, in, 0, 2);
      expect_rank(kind, in, 1, 2);
      if (in[0]->dim(1) != in[1]->dim(0)) shape_error(kind, "inner dimensions disagree", in);
      Tensor out({in[0]->dim(0), in[1]->dim(1)});
      out.matrix().noalias() = in[0]->matrix() * in[1]->matrix();
      return out;
    }
    case OpKind::Transpose: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in, 0, 2);
      Tensor out({in[0]->dim(1), in[0]->dim(0)});
      out.matrix() = in[0]->matrix().transpose();
      return out;
    }
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      expect_arity(kind, in, 2);
      expect_same(kind, in);
      Tensor out(in[0]->shape());
      if (kind == OpKind::Add) out.data() = in[0]->data() + in[1]->data();
      else if (kind == OpKind::Sub) out.data() = in[0]->data() - in[1]->data();
      else out.data() = in[0]->data().cwiseProduct(in[1]->data());
      return out;
    }
    case OpKind::Scale: {
      expect_arity(kind, in, 1);
      return Tensor(in[0]->shape(), attrs.factor * in[0]->data());
    }
    case OpKind::MulScalar: {
      expect_arity(kind, in, 2);
      if (in[1]->size() != 1) shape_error(kind, "second input must hold one value", in);
      return Tensor(in[0]->shape(), in[1]->data()[0] * in[0]->data());
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      expect_arity(kind, in, 1);
      double s = ordered_sum(in[0]->data());
      if (kind == OpKind::Mean) s /= static_cast<double>(in[0]->size());
      return Tensor::scalar(s);
    }
    case OpKind::Fill: {
      expect_arity(kind, in, 1);
      if (in[0]->size() != 1) shape_error(kind, "fill value must hold one value", in);
      return Tensor::full(attrs.shape, in[0]->data()[0]);
    }
    case OpKind::Relu: {
      expect_arity(kind, in, 1);
      return Tensor(in[0]->shape(), in[0]->data().cwiseMax(0.0));
    }
    case OpKind::ReluMask: {
      expect_arity(kind, in, 2);
      expect_same(kind, in);
      Tensor out(in[0]->shape());
      for (Index i = 0; i < out.size(); ++i) out[i] = (*in[1])[i] > 0.0 ? (*in[0])[i] : 0.0;
      return out;
    }
    case OpKind::BiasAdd: {
      expect_arity(kind, in, 2);
      if (in[0]->rank() < 2 || in[1]->rank() != 1 || in[1]->dim(0) != in[0]->dim(1)) {
        shape_error(kind, "bias length must equal axis-1 extent", in);
      }
      Tensor out = *in[0];
      const Index channels = in[0]->dim(1);
      const Index inner = in[0]->size() / (in[0]->dim(0) * channels);
      for (Index n = 0; n < in[0]->dim(0); ++n)
        for (Index c = 0; c < channels; ++c)
          out.data().segment((n * channels + c) * inner, inner).array() += (*in[1])[c];
      return out;
    }
    case OpKind::ChannelSum: {
      expect_arity(kind, in, 1);
      if (in[0]->rank() < 2) shape_error(kind, "input needs rank >= 2", in);
      const Index channels = in[0]->dim(1);
      const Index inner = in[0]->size() / (in[0]->dim(0) * channels);
      Tensor out({channels});
      for (Index n = 0; n < in[0]->dim(0); ++n)
        for (Index c = 0; c < channels; ++c)
          for (Index i = 0; i < inner; ++i) out[c] += (*in[0])[(n * channels + c) * inner + i];
      return out;
    }
    case OpKind::ChannelBroadcast: {
      expect_arity(kind, in, 1);
      if (attrs.shape.size() < 2 || in[0]->rank() != 1 || in[0]->dim(0) != attrs.shape[1]) {
        shape_error(kind, "vector length must equal axis-1 extent of " + to_string(attrs.shape), in);
      }
      Tensor out(attrs.shape);
      const Index channels = attrs.shape[1];
      const Index inner = out.size() / (attrs.shape[0] * channels);
      for (Index n = 0; n < attrs.shape[0]; ++n)
        for (Index c = 0; c < channels; ++c) out.data().segment((n * channels + c) * inner, inner).setConstant((*in[0])[c]);
      return out;
    }
    case OpKind::RowSumBroadcast: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in, 0, 2);
      Tensor out(in[0]->shape());
      const auto x = in[0]->matrix();
      auto o = out.matrix();
      for (Index r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (Index c = 0; c < x.cols(); ++c) s += x(r, c);
        o.row(r).setConstant(s);
      }
      return out;
    }
    case OpKind::Softmax: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in, 0, 2);
      return softmax_rows(*in[0]);
    }
    case OpKind::SoftmaxCrossEntropy: {
      expect_arity(kind, in, 1);
      expect_rank(kind, in, 0, 2);
      const auto z = in[0]->matrix();
      if (static_cast<Index>(attrs.labels.size()) != z.rows()) shape_error(kind, "one label per row required", in);
      double total = 0.0;
      for (Index r = 0; r < z.rows(); ++r) {
        const int y = attrs.labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= z.cols()) {
          shape_error(kind, "label " + std::to_string(y) + " outside [0," + std::to_string(z.cols()) + ")", in);
        }
        const double m = z.row(r).maxCoeff();
        double acc = 0.0;
        for (Index c = 0; c < z.cols(); ++c) acc += std::exp(z(r, c) - m);
        total += m + std::log(acc) - z(r, y);
      }
      return Tensor::scalar(total / static_cast<double>(z.rows()));
    }
    case OpKind::Conv2d: {
      expect_arity(kind, in, 2);
      const auto g = conv_geometry(kind, in[0]->shape(), in[1]->shape(), attrs.stride, attrs.padding, in);
      Tensor out({g.n, g.f, g.oh, g.ow});
      const double* x = in[0]->data().data();
      const double* w = in[1]->data().data();
      double* y = out.data().data();
      for_each_tap(g, [&](Index xi, Index wi, Index yi) { y[yi] += x[xi] * w[wi]; });
      return out;
    }
    case OpKind::Conv2dInputGrad: {
      expect_arity(kind, in, 2);
      const auto g = conv_geometry(kind, attrs.shape, in[1]->shape(), attrs.stride, attrs.padding, in);
      if (in[0]->shape() != Shape{g.n, g.f, g.oh, g.ow}) shape_error(kind, "gradient shape differs from conv output", in);
      Tensor out(attrs.shape);
      const double* gy = in[0]->data().data();
      const double* w = in[1]->data().data();
      double* dx = out.data().data();
      for_each_tap(g, [&](Index xi, Index wi, Index yi) { dx[xi] += gy[yi] * w[wi]; });
      return out;
    }
    case OpKind::Conv2dWeightGrad: {
      expect_arity(kind, in, 2);
      const auto g = conv_geometry(kind, in[0]->shape(), attrs.shape, attrs.stride, attrs.padding, in);
      if (in[1]->shape() != Shape{g.n, g.f, g.oh, g.ow}) shape_error(kind, "gradient shape differs from conv output", in);
      Tensor out(attrs.shape);
      const double* x = in[0]->data().data();
      const double* gy = in[1]->data().data();
      double* dw = out.data().data();
      for_each_tap(g, [&](Index xi, Index wi, Index yi) { dw[wi] += gy[yi] * x[xi]; });
      return out;
    }
    case OpKind::MaxPool: {
      expect_arity(kind, in, 1);
      const Shape out_shape = pooled_shape(kind, *in[0], in);
      Tensor out(out_shape);
      const auto idx = pool_argmax(*in[0], out_shape);
      for (std::size_t o = 0; o < idx.size(); ++o) out[static_cast<Index>(o)] = (*in[0])[idx[o]];
      return out;
    }
    case OpKind::MaxPoolScatter: {
      expect_arity(kind, in, 2);
      const Shape out_shape = pooled_shape(kind, *in[1], in);
      if (in[0]->shape() != out_shape) shape_error(kind, "gradient shape differs from pooled shape", in);
      Tensor out(in[1]->shape());
      const auto idx = pool_argmax(*in[1], out_shape);
      for (std::size_t o = 0; o < idx.size(); ++o) out[idx[o]] += (*in[0])[static_cast<Index>(o)];
      return out;
    }
    case OpKind::MaxPoolGather: {
      expect_arity(kind, in, 2);
      expect_same(kind, in);
      const Shape out_shape = pooled_shape(kind, *in[1], in);
      Tensor out(out_shape);
      const auto idx = pool_argmax(*in[1], out_shape);
      for (std::size_t o = 0; o < idx.size(); ++o) out[static_cast<Index>(o)] = (*in[0])[idx[o]];
      return out;
    }
    case OpKind::Reshape: {
      expect_arity(kind, in, 1);
      if (numel(attrs.shape) != in[0]->size()) shape_error(kind, "cannot reshape to " + to_string(attrs.shape), in);
      return in[0]->reshaped(attrs.shape);
    }
  }
  throw std::logic_error("evaluate_op: unhandled op");
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw std::domain_error("leaf: non-finite value");
  nodes_.push_back(Node{OpKind::Leaf, {}, {}, std::move(value)});
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw std::domain_error("constant: non-finite value");
  nodes_.push_back(Node{OpKind::Constant, {}, {}, std::move(value)});
  return {this, nodes_.size() - 1};
}

Var Tape::var(std::size_t id) {
  if (id >= nodes_.size()) throw std::out_of_range("tape: node " + std::to_string(id) + " does not exist");
  return {this, id};
}

Var Tape::record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> values;
  std::vector<std::size_t> ids;
  values.reserve(inputs.size());
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": input is not on this tape");
    }
    values.push_back(&nodes_[v.id()].value);
    ids.push_back(v.id());
  }
  Tensor out = evaluate_op(kind, values, attrs);
  if (!out.all_finite()) {
    throw std::domain_error(std::string(op_name(kind)) + ": non-finite value in output " + to_string(out.shape()));
  }
  nodes_.push_back(Node{kind, std::move(ids), std::move(attrs), std::move(out)});
  return {this, nodes_.size() - 1};
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> values;
  values.reserve(nodes_.size());
  std::vector<const Tensor*> in;
  for (const Node& node : nodes_) {
    if (node.kind == OpKind::Leaf || node.kind == OpKind::Constant) {
      values.push_back(node.value);
      continue;
    }
    in.clear();
    for (std::size_t id : node.inputs) in.push_back(&values[id]);
    values.push_back(evaluate_op(node.kind, in, node.attrs));
  }
  return values;
}

std::string Tape::dump() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    os << '%' << i << " = " << op_name(n.kind) << '(';
    for (std::size_t j = 0; j < n.inputs.size(); ++j) os << (j ? ", %" : "%") << n.inputs[j];
    os << ") -> " << to_string(n.value.shape()) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Op wrappers

namespace {

Tape& common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::invalid_argument("op: unbound Var");
    if (t && t != &v.tape()) throw std::invalid_argument("op: inputs live on different tapes");
    t = &v.tape();
  }
  return *t;
}

Var unary(OpKind kind, Var a, OpAttrs attrs = {}) { return a.tape().record(kind, {a}, std::move(attrs)); }

Var binary(OpKind kind, Var a, Var b, OpAttrs attrs = {}) {
  return common_tape({a, b}).record(kind, {a, b}, std::move(attrs));
}

}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::MatMul, a, b); }
Var add(Var a, Var b) { return binary(OpKind::Add, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
Var mul_scalar(Var a, Var s) { return binary(OpKind::MulScalar, a, s); }
Var transpose(Var a) { return unary(OpKind::Transpose, a); }
Var relu(Var a) { return unary(OpKind::Relu, a); }
Var relu_mask(Var value, Var key) { return binary(OpKind::ReluMask, value, key); }
Var mean(Var a) { return unary(OpKind::Mean, a); }
Var sum(Var a) { return unary(OpKind::Sum, a); }
Var channel_sum(Var a) { return unary(OpKind::ChannelSum, a); }
Var row_sum_broadcast(Var a) { return unary(OpKind::RowSumBroadcast, a); }
Var softmax(Var a) { return unary(OpKind::Softmax, a); }
Var max_pool2d(Var input) { return unary(OpKind::MaxPool, input); }
Var max_pool_scatter(Var grad_out, Var key) { return binary(OpKind::MaxPoolScatter, grad_out, key); }
Var max_pool_gather(Var value, Var key) { return binary(OpKind::MaxPoolGather, value, key); }
Var bias_add(Var input, Var bias) { return binary(OpKind::BiasAdd, input, bias); }

Var scale(Var a, double factor) {
  OpAttrs attrs;
  attrs.factor = factor;
  return unary(OpKind::Scale, a, std::move(attrs));
}

Var fill(Var s, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary(OpKind::Fill, s, std::move(attrs));
}

Var reshape(Var a, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary(OpKind::Reshape, a, std::move(attrs));
}

Var channel_broadcast(Var b, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary(OpKind::ChannelBroadcast, b, std::move(attrs));
}

Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
  OpAttrs attrs;
  attrs.labels = std::move(labels);
  return unary(OpKind::SoftmaxCrossEntropy, logits, std::move(attrs));
}

Var conv2d(Var input, Var weight, Index stride, Index padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return binary(OpKind::Conv2d, input, weight, std::move(attrs));
}

Var conv2d_input_grad(Var grad_out, Var weight, Shape input_shape, Index stride, Index padding) {
  OpAttrs attrs;
  attrs.shape = std::move(input_shape);
  attrs.stride = stride;
  attrs.padding = padding;
  return binary(OpKind::Conv2dInputGrad, grad_out, weight, std::move(attrs));
}

Var conv2d_weight_grad(Var input, Var grad_out, Shape weight_shape, Index stride, Index padding) {
  OpAttrs attrs;
  attrs.shape = std::move(weight_shape);
  attrs.stride = stride;
  attrs.padding = padding;
  return binary(OpKind::Conv2dWeightGrad, input, grad_out, std::move(attrs));
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace {

// Contribution of node `out` to the adjoint of its input in `slot`, given the
// adjoint `g` of `out`. Every rule is built from recorded ops.
Var vector_jacobian(Tape& tape, std::size_t out_id, std::size_t slot, Var g) {
  const Node& node = tape.node(out_id);
  const Var out = tape.var(out_id);
  auto input = [&](std::size_t i) { return tape.var(node.inputs[i]); };
  const Node& n = node;  // stable: tape nodes live in a deque

  switch (n.kind) {
    case OpKind::MatMul:
      return slot == 0 ? matmul(g, transpose(input(1))) : matmul(transpose(input(0)), g);
    case OpKind::Transpose:
      return transpose(g);
    case OpKind::Add:
      return g;
    case OpKind::Sub:
      return slot == 0 ? g : scale(g, -1.0);
    case OpKind::Mul:
      return mul(g, input(1 - slot));
    case OpKind::Scale:
      return scale(g, n.attrs.factor);
    case OpKind::MulScalar:
      if (slot == 0) return mul_scalar(g, input(1));
      return reshape(sum(mul(g, input(0))), input(1).shape());
    case OpKind::Sum:
      return fill(g, input(0).shape());
    case OpKind::Mean:
      return scale(fill(g, input(0).shape()), 1.0 / static_cast<double>(input(0).value().size()));
    case OpKind::Fill:
      return reshape(sum(g), input(0).shape());
    case OpKind::Relu:
      return relu_mask(g, input(0));
    case OpKind::ReluMask:
      return relu_mask(g, input(1));
    case OpKind::BiasAdd:
      return slot == 0 ? g : channel_sum(g);
    case OpKind::ChannelSum:
      return channel_broadcast(g, input(0).shape());
    case OpKind::ChannelBroadcast:
      return channel_sum(g);
    case OpKind::RowSumBroadcast:
      return row_sum_broadcast(g);
    case OpKind::Softmax: {
      const Var sg = mul(out, g);
      return sub(sg, mul(out, row_sum_broadcast(sg)));
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Var logits = input(0);
      const Index rows = logits.shape()[0];
      Tensor onehot(logits.shape());
      for (Index r = 0; r < rows; ++r) onehot.matrix()(r, n.attrs.labels[static_cast<std::size_t>(r)]) = 1.0;
      const Var diff = sub(softmax(logits), tape.constant(std::move(onehot)));
      return mul_scalar(scale(diff, 1.0 / static_cast<double>(rows)), g);
    }
    case OpKind::Conv2d:
      return slot == 0 ? conv2d_input_grad(g, input(1), input(0).shape(), n.attrs.stride, n.attrs.padding)
                       : conv2d_weight_grad(input(0), g, input(1).shape(), n.attrs.stride, n.attrs.padding);
    case OpKind::Conv2dInputGrad:
      // inputs: (upstream gradient, weight)
      return slot == 0 ? conv2d(g, input(1), n.attrs.stride, n.attrs.padding)
                       : conv2d_weight_grad(g, input(0), input(1).shape(), n.attrs.stride, n.attrs.padding);
    case OpKind::Conv2dWeightGrad:
      // inputs: (conv input, upstream gradient)
      return slot == 0 ? conv2d_input_grad(input(1), g, input(0).shape(), n.attrs.stride, n.attrs.padding)
                       : conv2d(input(0), g, n.attrs.stride, n.attrs.padding);
    case OpKind::MaxPool:
      return max_pool_scatter(g, input(0));
    case OpKind::MaxPoolScatter:
      return max_pool_gather(g, input(1));
    case OpKind::MaxPoolGather:
      return max_pool_scatter(g, input(1));
    case OpKind::Reshape:
      return reshape(g, input(0).shape());
    case OpKind::Leaf:
    case OpKind::Constant:
      break;
  }
  throw std::logic_error("vector_jacobian: no rule for " + std::string(op_name(n.kind)));
}

// Input slots that carry no derivative (argmax/sign keys).
bool is_key_slot(OpKind kind, std::size_t slot) {
  return slot == 1 && (kind == OpKind::ReluMask || kind == OpKind::MaxPoolScatter || kind == OpKind::MaxPoolGather);
}

}  // namespace

std::vector<Var> gradients(Var loss, std::span<const Var> wrt) {
  if (!loss.valid()) throw std::invalid_argument("gradients: unbound loss");
  Tape& tape = loss.tape();
  if (loss.value().size() != 1) {
    throw std::invalid_argument("gradients: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  const std::size_t last = loss.id();
  std::vector<char> needed(last + 1, 0);
  for (const Var& v : wrt) {
    if (!v.valid() || &v.tape() != &tape || v.id() >= tape.size()) {
      throw std::invalid_argument("gradients: target is not on the loss's tape");
    }
    if (v.id() <= last) needed[v.id()] = 1;
  }
  for (std::size_t i = 0; i <= last; ++i) {
    if (needed[i]) continue;
    const Node& node = tape.node(i);
    for (std::size_t s = 0; s < node.inputs.size(); ++s) {
      if (!is_key_slot(node.kind, s) && needed[node.inputs[s]]) {
        needed[i] = 1;
        break;
      }
    }
  }

  std::vector<Var> adjoint(last + 1);
  adjoint[last] = tape.constant(Tensor::full(loss.shape(), 1.0));
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!needed[i] || !adjoint[i].valid()) continue;
    const std::size_t n_inputs = tape.node(i).inputs.size();
    for (std::size_t s = 0; s < n_inputs; ++s) {
      const std::size_t src = tape.node(i).inputs[s];
      if (is_key_slot(tape.node(i).kind, s) || !needed[src]) continue;
      const Var contribution = vector_jacobian(tape, i, s, adjoint[i]);
      adjoint[src] = adjoint[src].valid() ? add(adjoint[src], contribution) : contribution;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    if (v.id() <= last && adjoint[v.id()].valid()) out.push_back(adjoint[v.id()]);
    else out.push_back(tape.constant(Tensor::zeros(v.shape())));
  }
  return out;
}

GradientMap backward(Tape& tape, Var loss, std::span<const Var> leaves) {
  if (!loss.valid() || &loss.tape() != &tape) throw std::invalid_argument("backward: loss is not on this tape");
  for (const Var& v : leaves) {
    if (!v.valid() || &v.tape() != &tape || v.id() >= tape.size()) {
      throw std::invalid_argument("backward: leaf is not on this tape");
    }
  }
  const auto grads = gradients(loss, leaves);
  GradientMap map;
  for (std::size_t i = 0; i < leaves.size(); ++i) map.insert(leaves[i].id(), grads[i].value());
  return map;
}

}  // namespace mtl
