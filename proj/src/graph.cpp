#include "advcube/graph.hpp"

#include <stdexcept>

namespace advcube {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Conv2d: return "conv2d";
    case Op::Dense: return "dense";
    case Op::MaxPool2: return "maxpool2";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::LogSigmoid: return "log_sigmoid";
    case Op::Softmax: return "softmax";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Affine: return "affine";
    case Op::Log: return "log";
    case Op::SumSquares: return "sum_squares";
    case Op::Norm2: return "norm2";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MinDistance: return "min_distance";
    case Op::MatMul: return "matmul";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::Clamp: return "clamp";
    case Op::ClampSte: return "clamp_ste";
    case Op::Reshape: return "reshape";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_error(const std::string& where, const std::string& what) {
  throw std::invalid_argument("shape mismatch at " + where + ": " + what);
}

}  // namespace

template <typename Scalar>
std::string Graph<Scalar>::describe(int index) const {
  const auto& n = nodes_.at(static_cast<std::size_t>(index));
  std::string s = "node " + std::to_string(index) + " (" + std::string(op_name(n.op));
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

template <typename Scalar>
const Node<Scalar>& Graph<Scalar>::at(NodeId id) const {
  if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size()) {
    throw std::out_of_range("node id " + std::to_string(id.index) + " is not part of this graph");
  }
  return nodes_[static_cast<std::size_t>(id.index)];
}

template <typename Scalar>
NodeId Graph<Scalar>::push(Node<Scalar> node) {
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
NodeId Graph<Scalar>::input(const std::string& name, Shape shape) {
  if (name.empty()) throw std::invalid_argument("graph inputs need a name");
  if (leaves_.count(name)) throw std::invalid_argument("duplicate graph input '" + name + "'");
  shape_size(shape);
  Node<Scalar> n;
  n.op = Op::Input;
  n.name = name;
  n.shape = std::move(shape);
  auto id = push(std::move(n));
  leaves_[name] = id.index;
  return id;
}

template <typename Scalar>
NodeId Graph<Scalar>::constant(TensorT value) {
  Node<Scalar> n;
  n.op = Op::Constant;
  n.shape = value.shape();
  n.constant = std::make_shared<const TensorT>(std::move(value));
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::conv2d(NodeId x, NodeId weight, NodeId bias, int stride, int pad) {
  const auto where = "conv2d #" + std::to_string(nodes_.size());
  const auto& xs = at(x).shape;
  const auto& ws = at(weight).shape;
  const auto& bs = at(bias).shape;
  if (xs.size() != 3) shape_error(where, "input must be [H,W,C], got " + shape_string(xs));
  if (ws.size() != 4 || ws[0] != ws[1]) shape_error(where, "weight must be [K,K,Cin,Cout], got " + shape_string(ws));
  if (ws[2] != xs[2]) {
    shape_error(where, "input has " + std::to_string(xs[2]) + " channels, weight expects " + std::to_string(ws[2]));
  }
  if (bs.size() != 1 || bs[0] != ws[3]) shape_error(where, "bias must be [Cout], got " + shape_string(bs));
  if (stride < 1 || pad < 0) shape_error(where, "stride must be >= 1 and pad >= 0");
  const int k = ws[0];
  const int ho = (xs[0] + 2 * pad - k) / stride + 1;
  const int wo = (xs[1] + 2 * pad - k) / stride + 1;
  if (xs[0] + 2 * pad < k || xs[1] + 2 * pad < k || ho < 1 || wo < 1) {
    shape_error(where, "kernel " + std::to_string(k) + " does not fit input " + shape_string(xs));
  }
  Node<Scalar> n;
  n.op = Op::Conv2d;
  n.inputs = {x.index, weight.index, bias.index};
  n.shape = {ho, wo, ws[3]};
  n.stride = stride;
  n.pad = pad;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::dense(NodeId x, NodeId weight, NodeId bias) {
  const auto where = "dense #" + std::to_string(nodes_.size());
  const auto n_in = static_cast<int>(shape_size(at(x).shape));
  const auto& ws = at(weight).shape;
  const auto& bs = at(bias).shape;
  if (ws.size() != 2 || ws[0] != n_in) {
    shape_error(where, "weight must be [" + std::to_string(n_in) + ",m], got " + shape_string(ws));
  }
  if (bs.size() != 1 || bs[0] != ws[1]) shape_error(where, "bias must be [m], got " + shape_string(bs));
  Node<Scalar> n;
  n.op = Op::Dense;
  n.inputs = {x.index, weight.index, bias.index};
  n.shape = {ws[1]};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::maxpool2(NodeId x) {
  const auto& xs = at(x).shape;
  const auto where = "maxpool2 #" + std::to_string(nodes_.size());
  if (xs.size() != 3) shape_error(where, "input must be [H,W,C], got " + shape_string(xs));
  if (xs[0] < 2 || xs[1] < 2) shape_error(where, "pooled feature map smaller than 1x1 for input " + shape_string(xs));
  Node<Scalar> n;
  n.op = Op::MaxPool2;
  n.inputs = {x.index};
  n.shape = {xs[0] / 2, xs[1] / 2, xs[2]};
  return push(std::move(n));
}

#define ADVCUBE_UNARY(fn, kind)                 \
  template <typename Scalar>                    \
  NodeId Graph<Scalar>::fn(NodeId x) {          \
    Node<Scalar> n;                             \
    n.op = kind;                                \
    n.inputs = {x.index};                       \
    n.shape = at(x).shape;                      \
    return push(std::move(n));                  \
  }

ADVCUBE_UNARY(relu, Op::Relu)
ADVCUBE_UNARY(sigmoid, Op::Sigmoid)
ADVCUBE_UNARY(log_sigmoid, Op::LogSigmoid)
ADVCUBE_UNARY(softmax, Op::Softmax)
ADVCUBE_UNARY(log, Op::Log)
#undef ADVCUBE_UNARY

#define ADVCUBE_REDUCE(fn, kind)                \
  template <typename Scalar>                    \
  NodeId Graph<Scalar>::fn(NodeId x) {          \
    Node<Scalar> n;                             \
    n.op = kind;                                \
    n.inputs = {x.index};                       \
    at(x);                                      \
    n.shape = {1};                              \
    return push(std::move(n));                  \
  }

ADVCUBE_REDUCE(sum_squares, Op::SumSquares)
ADVCUBE_REDUCE(norm2, Op::Norm2)
ADVCUBE_REDUCE(sum, Op::Sum)
ADVCUBE_REDUCE(mean, Op::Mean)
#undef ADVCUBE_REDUCE

template <typename Scalar>
NodeId Graph<Scalar>::add(NodeId x, NodeId y) {
  if (at(x).shape != at(y).shape) {
    shape_error("add #" + std::to_string(nodes_.size()),
                shape_string(at(x).shape) + " vs " + shape_string(at(y).shape));
  }
  Node<Scalar> n;
  n.op = Op::Add;
  n.inputs = {x.index, y.index};
  n.shape = at(x).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::mul(NodeId x, NodeId y) {
  if (at(x).shape != at(y).shape) {
    shape_error("mul #" + std::to_string(nodes_.size()),
                shape_string(at(x).shape) + " vs " + shape_string(at(y).shape));
  }
  Node<Scalar> n;
  n.op = Op::Mul;
  n.inputs = {x.index, y.index};
  n.shape = at(x).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::affine(NodeId x, double scale, double offset) {
  Node<Scalar> n;
  n.op = Op::Affine;
  n.inputs = {x.index};
  n.shape = at(x).shape;
  n.a = scale;
  n.b = offset;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::min_distance(NodeId points, NodeId columns) {
  const auto where = "min_distance #" + std::to_string(nodes_.size());
  const auto& ps = at(points).shape;
  const auto& cs = at(columns).shape;
  if (ps.size() != 2 || cs.size() != 2 || ps[1] != cs[0]) {
    shape_error(where, "points [n,d] and columns [d,q] required, got " + shape_string(ps) + " and " +
                           shape_string(cs));
  }
  Node<Scalar> n;
  n.op = Op::MinDistance;
  n.inputs = {points.index, columns.index};
  n.shape = {ps[0]};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::matmul(NodeId x, NodeId y) {
  const auto& xs = at(x).shape;
  const auto& ys = at(y).shape;
  if (xs.size() != 2 || ys.size() != 2 || xs[1] != ys[0]) {
    shape_error("matmul #" + std::to_string(nodes_.size()), shape_string(xs) + " x " + shape_string(ys));
  }
  Node<Scalar> n;
  n.op = Op::MatMul;
  n.inputs = {x.index, y.index};
  n.shape = {xs[0], ys[1]};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::gather(NodeId x, std::vector<int> indices, Shape out_shape) {
  const auto where = "gather #" + std::to_string(nodes_.size());
  const auto n_in = static_cast<int>(shape_size(at(x).shape));
  if (shape_size(out_shape) != indices.size()) shape_error(where, "index count does not match output shape");
  for (int i : indices) {
    if (i < 0 || i >= n_in) shape_error(where, "index " + std::to_string(i) + " out of range");
  }
  Node<Scalar> n;
  n.op = Op::Gather;
  n.inputs = {x.index};
  n.shape = std::move(out_shape);
  n.indices = std::make_shared<const std::vector<int>>(std::move(indices));
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::scatter(NodeId base, NodeId values, std::vector<int> indices) {
  const auto where = "scatter #" + std::to_string(nodes_.size());
  const auto n_base = static_cast<int>(shape_size(at(base).shape));
  if (shape_size(at(values).shape) != indices.size()) shape_error(where, "index count does not match values");
  std::vector<char> seen(static_cast<std::size_t>(n_base), 0);
  for (int i : indices) {
    if (i < 0 || i >= n_base) shape_error(where, "index " + std::to_string(i) + " out of range");
    if (seen[static_cast<std::size_t>(i)]++) shape_error(where, "duplicate index " + std::to_string(i));
  }
  Node<Scalar> n;
  n.op = Op::Scatter;
  n.inputs = {base.index, values.index};
  n.shape = at(base).shape;
  n.indices = std::make_shared<const std::vector<int>>(std::move(indices));
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::clamp(NodeId x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp bounds out of order");
  Node<Scalar> n;
  n.op = Op::Clamp;
  n.inputs = {x.index};
  n.shape = at(x).shape;
  n.a = lo;
  n.b = hi;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::clamp_ste(NodeId x, double lo, double hi) {
  auto id = clamp(x, lo, hi);
  nodes_.back().op = Op::ClampSte;
  return id;
}

template <typename Scalar>
NodeId Graph<Scalar>::reshape(NodeId x, Shape shape) {
  if (shape_size(shape) != shape_size(at(x).shape)) {
    shape_error("reshape #" + std::to_string(nodes_.size()),
                shape_string(at(x).shape) + " -> " + shape_string(shape));
  }
  Node<Scalar> n;
  n.op = Op::Reshape;
  n.inputs = {x.index};
  n.shape = std::move(shape);
  return push(std::move(n));
}

template <typename Scalar>
void Graph<Scalar>::mark_output(const std::string& name, NodeId node) {
  at(node);
  outputs_[name] = node.index;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace advcube
