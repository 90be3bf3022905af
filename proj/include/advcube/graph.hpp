#pragma once

#include "advcube/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace advcube {

enum class Op {
  Input,
  Constant,
  Conv2d,       // x[H,W,Cin], w[K,K,Cin,Cout], b[Cout] -> [Ho,Wo,Cout]
  Dense,        // x[*] flattened to n, w[n,m], b[m] -> [m]
  MaxPool2,     // [H,W,C] -> [H/2,W/2,C]
  Relu,
  Sigmoid,
  LogSigmoid,
  Softmax,      // along the last axis
  Add,
  Mul,
  Affine,       // a*x + b
  Log,
  SumSquares,   // -> [1]
  Norm2,        // -> [1]
  Sum,          // -> [1]
  Mean,         // -> [1]
  MinDistance,  // p[n,d], c[d,q] -> [n], min over columns of ||p_i - c_j||
  MatMul,       // a[n,k], b[k,m] -> [n,m]
  Gather,       // out[i] = x[idx[i]]
  Scatter,      // out = base; out[idx[i]] = values[i]
  Clamp,        // gradient zero outside [lo,hi]
  ClampSte,     // straight-through gradient
  Reshape,
};

std::string_view op_name(Op op);

struct NodeId {
  int index = -1;
  bool valid() const { return index >= 0; }
  friend bool operator==(NodeId a, NodeId b) { return a.index == b.index; }
};

template <typename Scalar>
struct Node {
  Op op = Op::Input;
  std::vector<int> inputs;
  Shape shape;
  std::string name;  // leaf name for Input
  int stride = 1;
  int pad = 0;
  double a = 1.0;  // Affine scale, Clamp lower bound
  double b = 0.0;  // Affine offset, Clamp upper bound
  std::shared_ptr<const std::vector<int>> indices;
  std::shared_ptr<const Tensor<Scalar>> constant;
};

/// Tape of primitive ops. Nodes are appended in topological order and shapes
/// are inferred (and checked) as the graph is built; evaluation is separate.
template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;

  NodeId input(const std::string& name, Shape shape);
  NodeId constant(TensorT value);

  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, int stride, int pad);
  NodeId dense(NodeId x, NodeId weight, NodeId bias);
  NodeId maxpool2(NodeId x);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  /// log(sigmoid(x)) without forming sigmoid(x), so it stays finite and keeps
  /// its gradient for very negative x.
  NodeId log_sigmoid(NodeId x);
  NodeId softmax(NodeId x);
  NodeId add(NodeId x, NodeId y);
  NodeId mul(NodeId x, NodeId y);
  NodeId affine(NodeId x, double scale, double offset);
  NodeId scale(NodeId x, double s) { return affine(x, s, 0.0); }
  NodeId log(NodeId x);
  NodeId sum_squares(NodeId x);
  NodeId norm2(NodeId x);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId min_distance(NodeId points, NodeId columns);
  NodeId matmul(NodeId x, NodeId y);
  NodeId gather(NodeId x, std::vector<int> indices, Shape out_shape);
  NodeId scatter(NodeId base, NodeId values, std::vector<int> indices);
  NodeId clamp(NodeId x, double lo, double hi);
  NodeId clamp_ste(NodeId x, double lo, double hi);
  NodeId reshape(NodeId x, Shape shape);

  void mark_output(const std::string& name, NodeId node);

  const std::vector<Node<Scalar>>& nodes() const { return nodes_; }
  const Node<Scalar>& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id.index)); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  const std::map<std::string, int>& leaves() const { return leaves_; }
  const std::map<std::string, int>& outputs() const { return outputs_; }
  std::string describe(int index) const;

 private:
  NodeId push(Node<Scalar> node);
  const Node<Scalar>& at(NodeId id) const;

  std::vector<Node<Scalar>> nodes_;
  std::map<std::string, int> leaves_;
  std::map<std::string, int> outputs_;
};

template <typename Scalar>
using Bindings = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
using NamedTensors = std::map<std::string, Tensor<Scalar>>;

/// Forward pass. Returns every marked output.
template <typename Scalar>
NamedTensors<Scalar> evaluate(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings);

template <typename Scalar>
struct ValueAndGradient {
  NamedTensors<Scalar> outputs;
  NamedTensors<Scalar> gradients;
};

/// Reverse accumulation of d(seed_output)/d(leaf) for each leaf in `wrt`.
/// The seed output must hold a single element.
template <typename Scalar>
ValueAndGradient<Scalar> value_and_gradient(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                                            const std::vector<std::string>& wrt, const std::string& seed_output);

template <typename Scalar>
NamedTensors<Scalar> gradient(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                              const std::vector<std::string>& wrt, const std::string& seed_output) {
  return value_and_gradient(graph, bindings, wrt, seed_output).gradients;
}

/// Hash of every discrete branch taken in a forward pass (relu sign, pooling
/// argmax, nearest column, clamp side). Equal signatures mean the same
/// piecewise-smooth region.
template <typename Scalar>
std::uint64_t activation_signature(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings);

struct FdEntry {
  std::string leaf;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool skipped = false;  // kink-adjacent
};

struct FdReport {
  std::vector<FdEntry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

struct FdOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Coordinates per leaf to probe; 0 checks all of them.
  std::size_t samples_per_leaf = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, so that near-zero gradients
  /// are compared absolutely.
  double abs_floor = 1e-6;
};

/// Compares reverse-mode gradients to central differences coordinate by
/// coordinate. A coordinate is skipped as kink-adjacent when moving it by
/// +-10*step changes the activation signature.
template <typename Scalar>
FdReport finite_difference_check(const Graph<Scalar>& graph, const Bindings<Scalar>& bindings,
                                 const std::vector<std::string>& wrt, const std::string& seed_output,
                                 const FdOptions& options);

inline double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace advcube
