#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadiv::ad {

/// Dense column-major shape. A scalar is 1x1, a column vector is n x 1.
struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool operator==(const Shape&) const = default;

  static Shape scalar() { return {1, 1}; }
  static Shape column(std::size_t n) { return {n, 1}; }
  static Shape row(std::size_t n) { return {1, n}; }
};

std::string to_string(const Shape& s);

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Pow,
  Tanh,
  Relu,
  Abs,
  Step,        // 1[x > 0], zero derivative
  Sign,        // sign(x) with sign(0) = 0, zero derivative
  Detach,      // identity value, zero derivative
  Sum,
  Dot,
  MaxReduce,
  ArgMaxMask,  // one-hot of the first maximum, zero derivative
  LogSumExp,
  LogSumExpCols,
  LogAddExp,
  MatMul,
  Transpose,
  Slice,
  Embed,
  Scatter,     // sum of windows written into a zero matrix
  Reshape,
  Concat,
  Broadcast,
};

const char* op_name(Op op);

/// Names of the differentiable primitives, each with rules valid to second order.
std::vector<std::string> supported_primitives();

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid only for the Graph
/// that created it and only while that Graph is alive.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  std::uint32_t index() const { return index_; }

  const Shape& shape() const;
  std::size_t size() const { return shape().size(); }
  std::span<const double> value() const;
  /// Value of a 1x1 node.
  double item() const;
  std::vector<double> to_vector() const;

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t i) : graph_(g), index_(i) {}

  Graph* graph_ = nullptr;
  std::uint32_t index_ = 0;
};

/// Append-only computation graph with eager evaluation.
///
/// Backward passes append new nodes to the same graph, so every gradient is
/// itself a Var that can be differentiated again.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(std::vector<double> values, Shape shape);
  Var leaf(std::span<const double> values, Shape shape);
  Var scalar(double v);
  Var column(std::span<const double> values);
  Var row(std::span<const double> values);
  Var filled(Shape shape, double v);
  Var zeros(Shape shape) { return filled(shape, 0.0); }
  Var ones(Shape shape) { return filled(shape, 1.0); }

  /// Overwrites the payload of a leaf. Call replay() afterwards to refresh
  /// dependent nodes.
  void set_leaf(Var leaf, std::span<const double> values);
  /// Re-evaluates every non-leaf node in creation order.
  void replay();

  std::size_t size() const { return nodes_.size(); }

  // Node construction. Binary elementwise ops accept equal shapes or a 1x1
  // operand on either side; nothing else broadcasts.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var log_add_exp(Var a, Var b);
  Var neg(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var pow(Var a, double exponent);
  Var tanh(Var a);
  Var relu(Var a);
  Var abs(Var a);
  Var step(Var a);
  Var sign(Var a);
  Var detach(Var a);
  Var sum(Var a);
  Var dot(Var a, Var b);
  Var max_reduce(Var a);
  Var argmax_mask(Var a);
  Var logsumexp(Var a);
  /// Column-wise logsumexp of an R x C matrix, giving 1 x C.
  Var logsumexp_cols(Var a);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  /// Contiguous (column-major) window of `shape.size()` entries at `offset`.
  Var slice(Var a, std::size_t offset, Shape shape);
  /// Zero matrix of shape `total` with `a` written at `offset`.
  Var embed(Var a, std::size_t offset, Shape total);
  /// Zero matrix of shape `total` with parts[k] added at offsets[k]. Windows may overlap.
  Var scatter(std::span<const Var> parts, std::span<const std::size_t> offsets, Shape total);
  Var reshape(Var a, Shape shape);
  /// Stacks the flattened inputs into one column.
  Var concat(std::span<const Var> parts);
  Var broadcast(Var scalar, Shape shape);

  /// Reverse-mode gradient of a 1x1 `output` with respect to each `wrt`.
  /// Entries that `output` does not depend on get exact zero leaves.
  std::vector<Var> grad(Var output, std::span<const Var> wrt);
  /// Vector-Jacobian product: sum_i <seeds[i], d outputs[i] / d wrt>.
  /// Seeds are graph nodes, so the result is differentiable in them too.
  std::vector<Var> vjp(std::span<const Var> outputs, std::span<const Var> seeds,
                       std::span<const Var> wrt);

 private:
  friend class Var;

  // Leaves new elements uninitialized; evaluate writes every entry.
  template <class T>
  struct DefaultInit : std::allocator<T> {
    template <class U>
    struct rebind {
      using other = DefaultInit<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept {
      ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  };

  struct Node {
    Op op = Op::Leaf;
    Shape shape;
    std::vector<std::uint32_t> parents;
    double attr = 0.0;         // Pow exponent
    std::size_t offset = 0;    // Slice / Embed
    std::vector<std::size_t> offsets;  // Scatter, one per parent
    std::vector<double, DefaultInit<double>> value;
  };

  Var push(Node node);
  void evaluate(Node& node) const;
  const Node& node(Var v) const;
  void check_owned(Var v, const char* what) const;
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var a);
  Var reduce_like(Var g, const Shape& target);
  struct Adjoints;
  void backprop_node(std::uint32_t index, Var g, Adjoints& adjoint,
                     const std::vector<char>& active);

  std::vector<Node> nodes_;
};

// Operator sugar. Mixed Var/double forms create 1x1 leaves.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);

Var exp(Var a);
Var log(Var a);
Var pow(Var a, double exponent);
Var tanh(Var a);
Var relu(Var a);
Var abs(Var a);
Var sum(Var a);
Var dot(Var a, Var b);
Var logsumexp(Var a);
Var matmul(Var a, Var b);
/// softplus(x) = log(1 + e^x), computed stably.
Var softplus(Var a);

/// Builds a graph for `fn` at `point`, takes its reverse-mode gradient and
/// compares it with central differences. Returns the largest
/// |analytic - fd| / max(|analytic|, 1e-8) over coordinates.
double finite_difference_check(const std::function<Var(Graph&, Var)>& fn,
                               std::span<const double> point, double step);

}  // namespace metadiv::ad
