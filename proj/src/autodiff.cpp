#include "metadiv/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "metadiv/errors.hpp"

namespace metadiv::ad {

namespace {

using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
using MutMap = Eigen::Map<Eigen::MatrixXd>;

bool is_binary_elementwise(Op op) {
  return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div || op == Op::LogAddExp;
}

double apply_binary(Op op, double x, double y) {
  switch (op) {
    case Op::Add: return x + y;
    case Op::Sub: return x - y;
    case Op::Mul: return x * y;
    case Op::Div: return x / y;
    case Op::LogAddExp: {
      const double m = std::max(x, y);
      if (m == -std::numeric_limits<double>::infinity()) return m;
      if (std::isinf(m)) return m;
      return m + std::log1p(std::exp(-std::abs(x - y)));
    }
    default: return 0.0;
  }
}

double apply_unary(Op op, double x, double attr) {
  switch (op) {
    case Op::Neg: return -x;
    case Op::Exp: return std::exp(x);
    case Op::Log: return std::log(x);
    case Op::Pow: return std::pow(x, attr);
    case Op::Tanh: return std::tanh(x);
    case Op::Relu: return x > 0.0 ? x : 0.0;
    case Op::Abs: return std::abs(x);
    case Op::Step: return x > 0.0 ? 1.0 : 0.0;
    case Op::Sign: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    case Op::Detach: return x;
    default: return 0.0;
  }
}

template <class Out, class In, class F>
void map_unary(Out& out, const In& a, F f) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
}

// A 1x1 operand broadcasts; the loop is chosen once per node.
template <class Out, class In, class F>
void map_binary(Out& out, const In& a, const In& b, F f) {
  const std::size_t size = out.size();
  if (a.size() == 1 && size != 1) {
    const double x = a[0];
    for (std::size_t i = 0; i < size; ++i) out[i] = f(x, b[i]);
  } else if (b.size() == 1 && size != 1) {
    const double y = b[0];
    for (std::size_t i = 0; i < size; ++i) out[i] = f(a[i], y);
  } else {
    for (std::size_t i = 0; i < size; ++i) out[i] = f(a[i], b[i]);
  }
}

double logsumexp_range(const double* begin, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, begin[i]);
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(begin[i] - m);
  return m + std::log(acc);
}

}  // namespace

std::string to_string(const Shape& s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Pow: return "pow";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Abs: return "abs";
    case Op::Step: return "step";
    case Op::Sign: return "sign";
    case Op::Detach: return "detach";
    case Op::Sum: return "sum";
    case Op::Dot: return "dot";
    case Op::MaxReduce: return "max";
    case Op::ArgMaxMask: return "argmax_mask";
    case Op::LogSumExp: return "logsumexp";
    case Op::LogSumExpCols: return "logsumexp_cols";
    case Op::LogAddExp: return "log_add_exp";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Slice: return "slice";
    case Op::Embed: return "embed";
    case Op::Scatter: return "scatter";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Broadcast: return "broadcast";
  }
  return "?";
}

std::vector<std::string> supported_primitives() {
  return {"add", "sub",  "mul",  "div", "neg", "exp",     "log",       "pow",
          "tanh", "relu", "abs", "sum", "dot", "max", "logsumexp", "logsumexp_cols",
          "log_add_exp", "matmul", "transpose", "slice", "embed", "scatter", "reshape", "concat",
          "broadcast"};
}

// ---------------------------------------------------------------------------
// Var

const Shape& Var::shape() const { return graph_->node(*this).shape; }

std::span<const double> Var::value() const { return graph_->node(*this).value; }

double Var::item() const {
  const auto& n = graph_->node(*this);
  if (!n.shape.is_scalar()) {
    throw std::invalid_argument("Var::item on non-scalar node of shape " + to_string(n.shape));
  }
  return n.value[0];
}

std::vector<double> Var::to_vector() const {
  auto v = value();
  return {v.begin(), v.end()};
}

// ---------------------------------------------------------------------------
// Graph: construction

const Graph::Node& Graph::node(Var v) const { return nodes_[v.index_]; }

void Graph::check_owned(Var v, const char* what) const {
  if (v.graph_ != this) {
    throw std::invalid_argument(std::string(what) + ": Var belongs to a different Graph");
  }
}

Var Graph::push(Node n) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw std::length_error("Graph node limit reached");
  }
  if (n.op != Op::Leaf) evaluate(n);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::leaf(std::vector<double> values, Shape shape) {
  if (values.size() != shape.size()) {
    throw std::invalid_argument("leaf: " + std::to_string(values.size()) +
                                " values for shape " + to_string(shape));
  }
  Node n;
  n.shape = shape;
  n.value.assign(values.begin(), values.end());
  return push(std::move(n));
}

Var Graph::leaf(std::span<const double> values, Shape shape) {
  return leaf(std::vector<double>(values.begin(), values.end()), shape);
}

Var Graph::scalar(double v) { return leaf(std::vector<double>{v}, Shape::scalar()); }

Var Graph::column(std::span<const double> values) {
  return leaf(values, Shape::column(values.size()));
}

Var Graph::row(std::span<const double> values) { return leaf(values, Shape::row(values.size())); }

Var Graph::filled(Shape shape, double v) { return leaf(std::vector<double>(shape.size(), v), shape); }

void Graph::set_leaf(Var v, std::span<const double> values) {
  check_owned(v, "set_leaf");
  auto& n = nodes_[v.index_];
  if (n.op != Op::Leaf) throw std::invalid_argument("set_leaf: node is not a leaf");
  if (values.size() != n.value.size()) throw std::invalid_argument("set_leaf: size mismatch");
  std::copy(values.begin(), values.end(), n.value.begin());
}

void Graph::replay() {
  for (auto& n : nodes_) {
    if (n.op != Op::Leaf) evaluate(n);
  }
}

Var Graph::binary(Op op, Var a, Var b) {
  check_owned(a, op_name(op));
  check_owned(b, op_name(op));
  const Shape sa = node(a).shape;
  const Shape sb = node(b).shape;
  Shape out;
  if (sa == sb || sb.is_scalar()) {
    out = sa;
  } else if (sa.is_scalar()) {
    out = sb;
  } else {
    throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " + to_string(sa) +
                                " vs " + to_string(sb));
  }
  Node n;
  n.op = op;
  n.shape = out;
  n.parents = {a.index_, b.index_};
  return push(std::move(n));
}

Var Graph::unary(Op op, Var a) {
  check_owned(a, op_name(op));
  Node n;
  n.op = op;
  n.shape = node(a).shape;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) { return binary(Op::Add, a, b); }
Var Graph::sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var Graph::mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var Graph::div(Var a, Var b) { return binary(Op::Div, a, b); }
Var Graph::log_add_exp(Var a, Var b) { return binary(Op::LogAddExp, a, b); }
Var Graph::neg(Var a) { return unary(Op::Neg, a); }
Var Graph::exp(Var a) { return unary(Op::Exp, a); }
Var Graph::log(Var a) { return unary(Op::Log, a); }
Var Graph::tanh(Var a) { return unary(Op::Tanh, a); }
Var Graph::relu(Var a) { return unary(Op::Relu, a); }
Var Graph::abs(Var a) { return unary(Op::Abs, a); }
Var Graph::step(Var a) { return unary(Op::Step, a); }
Var Graph::sign(Var a) { return unary(Op::Sign, a); }
Var Graph::detach(Var a) { return unary(Op::Detach, a); }
Var Graph::argmax_mask(Var a) { return unary(Op::ArgMaxMask, a); }

Var Graph::pow(Var a, double exponent) {
  check_owned(a, "pow");
  Node n;
  n.op = Op::Pow;
  n.shape = node(a).shape;
  n.parents = {a.index_};
  n.attr = exponent;
  return push(std::move(n));
}

Var Graph::sum(Var a) {
  check_owned(a, "sum");
  Node n;
  n.op = Op::Sum;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::dot(Var a, Var b) {
  check_owned(a, "dot");
  check_owned(b, "dot");
  if (!(node(a).shape == node(b).shape)) {
    throw std::invalid_argument("dot: shape mismatch " + to_string(node(a).shape) + " vs " +
                                to_string(node(b).shape));
  }
  Node n;
  n.op = Op::Dot;
  n.parents = {a.index_, b.index_};
  return push(std::move(n));
}

Var Graph::max_reduce(Var a) {
  check_owned(a, "max");
  if (node(a).shape.size() == 0) throw std::invalid_argument("max: empty input");
  Node n;
  n.op = Op::MaxReduce;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::logsumexp(Var a) {
  check_owned(a, "logsumexp");
  if (node(a).shape.size() == 0) throw std::invalid_argument("logsumexp: empty input");
  Node n;
  n.op = Op::LogSumExp;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::logsumexp_cols(Var a) {
  check_owned(a, "logsumexp_cols");
  const Shape s = node(a).shape;
  if (s.rows == 0) throw std::invalid_argument("logsumexp_cols: no rows");
  Node n;
  n.op = Op::LogSumExpCols;
  n.shape = Shape::row(s.cols);
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Shape sa = node(a).shape;
  const Shape sb = node(b).shape;
  if (sa.cols != sb.rows) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + to_string(sa) + " * " +
                                to_string(sb));
  }
  Node n;
  n.op = Op::MatMul;
  n.shape = {sa.rows, sb.cols};
  n.parents = {a.index_, b.index_};
  return push(std::move(n));
}

Var Graph::transpose(Var a) {
  check_owned(a, "transpose");
  const Shape s = node(a).shape;
  Node n;
  n.op = Op::Transpose;
  n.shape = {s.cols, s.rows};
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::slice(Var a, std::size_t offset, Shape shape) {
  check_owned(a, "slice");
  if (offset + shape.size() > node(a).shape.size()) {
    throw std::out_of_range("slice: window [" + std::to_string(offset) + ", " +
                            std::to_string(offset + shape.size()) + ") exceeds " +
                            to_string(node(a).shape));
  }
  Node n;
  n.op = Op::Slice;
  n.shape = shape;
  n.offset = offset;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::embed(Var a, std::size_t offset, Shape total) {
  check_owned(a, "embed");
  if (offset + node(a).shape.size() > total.size()) {
    throw std::out_of_range("embed: window exceeds target shape " + to_string(total));
  }
  Node n;
  n.op = Op::Embed;
  n.shape = total;
  n.offset = offset;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::scatter(std::span<const Var> parts, std::span<const std::size_t> offsets, Shape total) {
  if (parts.size() != offsets.size()) throw std::invalid_argument("scatter: parts and offsets differ in count");
  Node n;
  n.op = Op::Scatter;
  n.shape = total;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    check_owned(parts[k], "scatter");
    if (offsets[k] + node(parts[k]).shape.size() > total.size()) {
      throw std::out_of_range("scatter: window exceeds target shape " + to_string(total));
    }
    n.parents.push_back(parts[k].index_);
  }
  n.offsets.assign(offsets.begin(), offsets.end());
  return push(std::move(n));
}

Var Graph::reshape(Var a, Shape shape) {
  check_owned(a, "reshape");
  if (shape.size() != node(a).shape.size()) {
    throw std::invalid_argument("reshape: " + to_string(node(a).shape) + " to " + to_string(shape));
  }
  Node n;
  n.op = Op::Reshape;
  n.shape = shape;
  n.parents = {a.index_};
  return push(std::move(n));
}

Var Graph::concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Node n;
  n.op = Op::Concat;
  std::size_t total = 0;
  for (const Var& p : parts) {
    check_owned(p, "concat");
    n.parents.push_back(p.index_);
    total += node(p).shape.size();
  }
  n.shape = Shape::column(total);
  return push(std::move(n));
}

Var Graph::broadcast(Var s, Shape shape) {
  check_owned(s, "broadcast");
  if (!node(s).shape.is_scalar()) throw std::invalid_argument("broadcast: input must be 1x1");
  Node n;
  n.op = Op::Broadcast;
  n.shape = shape;
  n.parents = {s.index_};
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Graph: evaluation

void Graph::evaluate(Node& n) const {
  const std::size_t size = n.shape.size();
  n.value.resize(size);
  auto parent = [&](std::size_t k) -> const Node& { return nodes_[n.parents[k]]; };

  if (is_binary_elementwise(n.op)) {
    const auto& a = parent(0).value;
    const auto& b = parent(1).value;
    auto& out = n.value;
    switch (n.op) {
      case Op::Add: map_binary(out, a, b, [](double x, double y) { return x + y; }); return;
      case Op::Sub: map_binary(out, a, b, [](double x, double y) { return x - y; }); return;
      case Op::Mul: map_binary(out, a, b, [](double x, double y) { return x * y; }); return;
      case Op::Div: map_binary(out, a, b, [](double x, double y) { return x / y; }); return;
      default:
        map_binary(out, a, b, [op = n.op](double x, double y) { return apply_binary(op, x, y); });
        return;
    }
  }

  switch (n.op) {
    case Op::Leaf: return;
    case Op::Neg:
    case Op::Exp:
    case Op::Log:
    case Op::Pow:
    case Op::Tanh:
    case Op::Relu:
    case Op::Abs:
    case Op::Step:
    case Op::Sign:
    case Op::Detach: {
      const auto& a = parent(0).value;
      auto& out = n.value;
      switch (n.op) {
        case Op::Neg: map_unary(out, a, [](double x) { return -x; }); return;
        case Op::Exp: map_unary(out, a, [](double x) { return std::exp(x); }); return;
        case Op::Log: map_unary(out, a, [](double x) { return std::log(x); }); return;
        case Op::Relu: map_unary(out, a, [](double x) { return x > 0.0 ? x : 0.0; }); return;
        case Op::Step: map_unary(out, a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }); return;
        case Op::Detach: std::copy_n(a.begin(), size, out.begin()); return;
        default:
          map_unary(out, a, [op = n.op, attr = n.attr](double x) { return apply_unary(op, x, attr); });
          return;
      }
    }
    case Op::Sum: {
      const auto& a = parent(0).value;
      double acc = 0.0;
      for (double x : a) acc += x;
      n.value[0] = acc;
      return;
    }
    case Op::Dot: {
      const auto& a = parent(0).value;
      const auto& b = parent(1).value;
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
      n.value[0] = acc;
      return;
    }
    case Op::MaxReduce: {
      const auto& a = parent(0).value;
      n.value[0] = *std::max_element(a.begin(), a.end());
      return;
    }
    case Op::ArgMaxMask: {
      const auto& a = parent(0).value;
      std::fill(n.value.begin(), n.value.end(), 0.0);
      if (!a.empty()) {
        n.value[static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin())] = 1.0;
      }
      return;
    }
    case Op::LogSumExp: {
      const auto& a = parent(0).value;
      n.value[0] = logsumexp_range(a.data(), a.size());
      return;
    }
    case Op::LogSumExpCols: {
      const auto& p = parent(0);
      for (std::size_t c = 0; c < p.shape.cols; ++c) {
        n.value[c] = logsumexp_range(p.value.data() + c * p.shape.rows, p.shape.rows);
      }
      return;
    }
    case Op::MatMul: {
      const auto& a = parent(0);
      const auto& b = parent(1);
      ConstMap ma(a.value.data(), static_cast<Eigen::Index>(a.shape.rows),
                  static_cast<Eigen::Index>(a.shape.cols));
      ConstMap mb(b.value.data(), static_cast<Eigen::Index>(b.shape.rows),
                  static_cast<Eigen::Index>(b.shape.cols));
      MutMap out(n.value.data(), static_cast<Eigen::Index>(n.shape.rows),
                 static_cast<Eigen::Index>(n.shape.cols));
      out.noalias() = ma * mb;
      return;
    }
    case Op::Transpose: {
      const auto& a = parent(0);
      ConstMap ma(a.value.data(), static_cast<Eigen::Index>(a.shape.rows),
                  static_cast<Eigen::Index>(a.shape.cols));
      MutMap out(n.value.data(), static_cast<Eigen::Index>(n.shape.rows),
                 static_cast<Eigen::Index>(n.shape.cols));
      out = ma.transpose();
      return;
    }
    case Op::Slice: {
      const auto& a = parent(0).value;
      std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(n.offset), size, n.value.begin());
      return;
    }
    case Op::Embed: {
      const auto& a = parent(0).value;
      std::fill(n.value.begin(), n.value.end(), 0.0);
      std::copy(a.begin(), a.end(), n.value.begin() + static_cast<std::ptrdiff_t>(n.offset));
      return;
    }
    case Op::Scatter: {
      std::fill(n.value.begin(), n.value.end(), 0.0);
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const auto& v = parent(k).value;
        double* dst = n.value.data() + n.offsets[k];
        for (std::size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
      }
      return;
    }
    case Op::Reshape: {
      std::copy(parent(0).value.begin(), parent(0).value.end(), n.value.begin());
      return;
    }
    case Op::Concat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const auto& v = parent(k).value;
        std::copy(v.begin(), v.end(), n.value.begin() + static_cast<std::ptrdiff_t>(off));
        off += v.size();
      }
      return;
    }
    case Op::Broadcast: {
      std::fill(n.value.begin(), n.value.end(), parent(0).value[0]);
      return;
    }
    default: break;
  }
  throw std::logic_error(std::string("evaluate: unhandled op ") + op_name(n.op));
}

// ---------------------------------------------------------------------------
// Graph: reverse mode

Var Graph::reduce_like(Var g, const Shape& target) {
  const Shape gs = node(g).shape;
  if (gs == target) return g;
  if (target.is_scalar()) return sum(g);
  throw std::logic_error("reduce_like: cannot reduce " + to_string(gs) + " to " + to_string(target));
}

// Slice adjoints are held as pieces and merged into one Scatter when the
// parent is reached, so k slices of one node cost one dense matrix, not k.
struct Graph::Adjoints {
  struct Piece {
    Var value;
    std::size_t offset;
  };
  std::vector<Var> full;
  std::vector<std::vector<Piece>> pieces;

  explicit Adjoints(std::size_t n) : full(n), pieces(n) {}

  bool has(std::uint32_t i) const { return full[i].valid() || !pieces[i].empty(); }

  void add(Graph& g, std::uint32_t i, Var contrib) {
    full[i] = full[i].valid() ? g.add(full[i], contrib) : contrib;
  }

  Var take(Graph& g, std::uint32_t i) {
    if (pieces[i].empty()) return full[i];
    std::vector<Var> parts;
    std::vector<std::size_t> offsets;
    if (full[i].valid()) {
      parts.push_back(full[i]);
      offsets.push_back(0);
    }
    for (const Piece& p : pieces[i]) {
      parts.push_back(p.value);
      offsets.push_back(p.offset);
    }
    pieces[i].clear();
    full[i] = g.scatter(parts, offsets, g.nodes_[i].shape);
    return full[i];
  }
};

void Graph::backprop_node(std::uint32_t index, Var g, Adjoints& adjoint,
                          const std::vector<char>& active) {
  // Copy what we need: pushing nodes below may reallocate nodes_.
  const Op op = nodes_[index].op;
  const std::vector<std::uint32_t> parents = nodes_[index].parents;
  const double attr = nodes_[index].attr;
  const std::size_t offset = nodes_[index].offset;
  const Var self(this, index);

  auto is_active = [&](std::size_t k) { return active[parents[k]] != 0; };
  auto parent = [&](std::size_t k) { return Var(this, parents[k]); };
  auto pshape = [&](std::size_t k) { return nodes_[parents[k]].shape; };
  auto accumulate = [&](std::size_t k, Var contrib) { adjoint.add(*this, parents[k], contrib); };

  switch (op) {
    case Op::Leaf:
    case Op::Step:
    case Op::Sign:
    case Op::Detach:
    case Op::ArgMaxMask:
      return;
    case Op::Add:
      if (is_active(0)) accumulate(0, reduce_like(g, pshape(0)));
      if (is_active(1)) accumulate(1, reduce_like(g, pshape(1)));
      return;
    case Op::Sub:
      if (is_active(0)) accumulate(0, reduce_like(g, pshape(0)));
      if (is_active(1)) accumulate(1, reduce_like(neg(g), pshape(1)));
      return;
    case Op::Mul:
      if (is_active(0)) accumulate(0, reduce_like(mul(g, parent(1)), pshape(0)));
      if (is_active(1)) accumulate(1, reduce_like(mul(g, parent(0)), pshape(1)));
      return;
    case Op::Div:
      if (is_active(0)) accumulate(0, reduce_like(div(g, parent(1)), pshape(0)));
      if (is_active(1)) accumulate(1, reduce_like(neg(div(mul(g, self), parent(1))), pshape(1)));
      return;
    case Op::LogAddExp:
      for (std::size_t k = 0; k < 2; ++k) {
        if (is_active(k)) accumulate(k, reduce_like(mul(g, exp(sub(parent(k), self))), pshape(k)));
      }
      return;
    case Op::Neg: accumulate(0, neg(g)); return;
    case Op::Exp: accumulate(0, mul(g, self)); return;
    case Op::Log: accumulate(0, div(g, parent(0))); return;
    case Op::Pow:
      if (attr == 1.0) {
        accumulate(0, g);
      } else {
        accumulate(0, mul(mul(g, pow(parent(0), attr - 1.0)), scalar(attr)));
      }
      return;
    case Op::Tanh: accumulate(0, mul(g, sub(scalar(1.0), mul(self, self)))); return;
    case Op::Relu: accumulate(0, mul(g, step(parent(0)))); return;
    case Op::Abs: accumulate(0, mul(g, sign(parent(0)))); return;
    case Op::Sum: accumulate(0, broadcast(g, pshape(0))); return;
    case Op::Dot:
      if (is_active(0)) accumulate(0, mul(g, parent(1)));
      if (is_active(1)) accumulate(1, mul(g, parent(0)));
      return;
    case Op::MaxReduce: accumulate(0, mul(g, argmax_mask(parent(0)))); return;
    case Op::LogSumExp: accumulate(0, mul(g, exp(sub(parent(0), self)))); return;
    case Op::LogSumExpCols: {
      const Var ones_col = ones(Shape::column(pshape(0).rows));
      const Var softmax = exp(sub(parent(0), matmul(ones_col, self)));
      accumulate(0, mul(softmax, matmul(ones_col, g)));
      return;
    }
    case Op::MatMul:
      if (is_active(0)) accumulate(0, matmul(g, transpose(parent(1))));
      if (is_active(1)) accumulate(1, matmul(transpose(parent(0)), g));
      return;
    case Op::Transpose: accumulate(0, transpose(g)); return;
    case Op::Slice: adjoint.pieces[parents[0]].push_back({g, offset}); return;
    case Op::Embed: accumulate(0, slice(g, offset, pshape(0))); return;
    case Op::Reshape: accumulate(0, reshape(g, pshape(0))); return;
    case Op::Concat: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        const Shape s = pshape(k);
        if (is_active(k)) accumulate(k, slice(g, off, s));
        off += s.size();
      }
      return;
    }
    case Op::Scatter: {
      const std::vector<std::size_t> offsets = nodes_[index].offsets;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        if (is_active(k)) accumulate(k, slice(g, offsets[k], pshape(k)));
      }
      return;
    }
    case Op::Broadcast: accumulate(0, sum(g)); return;
  }
}

std::vector<Var> Graph::vjp(std::span<const Var> outputs, std::span<const Var> seeds,
                            std::span<const Var> wrt) {
  if (outputs.size() != seeds.size()) {
    throw std::invalid_argument("vjp: outputs and seeds differ in count");
  }
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    check_owned(outputs[i], "vjp output");
    check_owned(seeds[i], "vjp seed");
    if (!(node(outputs[i]).shape == node(seeds[i]).shape)) {
      throw std::invalid_argument("vjp: seed shape " + to_string(node(seeds[i]).shape) +
                                  " does not match output shape " +
                                  to_string(node(outputs[i]).shape));
    }
  }
  for (const Var& w : wrt) check_owned(w, "vjp wrt");

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (outputs.empty() || wrt.empty()) {
    for (const Var& w : wrt) result.push_back(zeros(node(w).shape));
    return result;
  }

  std::uint32_t hi = 0;
  for (const Var& o : outputs) hi = std::max(hi, o.index_);
  std::uint32_t lo = std::numeric_limits<std::uint32_t>::max();
  for (const Var& w : wrt) lo = std::min(lo, w.index_);

  std::vector<char> active(static_cast<std::size_t>(hi) + 1, 0);
  for (const Var& w : wrt) {
    if (w.index_ <= hi) active[w.index_] = 1;
  }
  for (std::uint32_t i = lo; i <= hi && lo <= hi; ++i) {
    if (active[i]) continue;
    for (std::uint32_t p : nodes_[i].parents) {
      if (p >= lo && active[p]) {
        active[i] = 1;
        break;
      }
    }
  }

  Adjoints adjoint(static_cast<std::size_t>(hi) + 1);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const std::uint32_t o = outputs[i].index_;
    if (!active[o]) continue;
    adjoint.add(*this, o, seeds[i]);
  }

  if (lo <= hi) {
    for (std::uint32_t i = hi + 1; i-- > lo;) {
      if (!active[i] || !adjoint.has(i)) continue;
      if (nodes_[i].op == Op::Leaf) continue;
      backprop_node(i, adjoint.take(*this, i), adjoint, active);
    }
  }

  for (const Var& w : wrt) {
    if (w.index_ <= hi && adjoint.has(w.index_)) {
      result.push_back(adjoint.take(*this, w.index_));
    } else {
      result.push_back(zeros(node(w).shape));
    }
  }
  return result;
}

std::vector<Var> Graph::grad(Var output, std::span<const Var> wrt) {
  check_owned(output, "grad");
  if (!node(output).shape.is_scalar()) {
    throw std::invalid_argument("grad: output must be 1x1, got " + to_string(node(output).shape));
  }
  const Var seed = scalar(1.0);
  return vjp(std::span<const Var>(&output, 1), std::span<const Var>(&seed, 1), wrt);
}

// ---------------------------------------------------------------------------
// Free functions

namespace {
Graph& owner(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.graph();
}
}  // namespace

Var operator+(Var a, Var b) { return owner(a).add(a, b); }
Var operator-(Var a, Var b) { return owner(a).sub(a, b); }
Var operator*(Var a, Var b) { return owner(a).mul(a, b); }
Var operator/(Var a, Var b) { return owner(a).div(a, b); }
Var operator-(Var a) { return owner(a).neg(a); }
Var operator+(Var a, double b) { return owner(a).add(a, owner(a).scalar(b)); }
Var operator+(double a, Var b) { return owner(b).add(owner(b).scalar(a), b); }
Var operator-(Var a, double b) { return owner(a).sub(a, owner(a).scalar(b)); }
Var operator-(double a, Var b) { return owner(b).sub(owner(b).scalar(a), b); }
Var operator*(Var a, double b) { return owner(a).mul(a, owner(a).scalar(b)); }
Var operator*(double a, Var b) { return owner(b).mul(owner(b).scalar(a), b); }
Var operator/(Var a, double b) { return owner(a).div(a, owner(a).scalar(b)); }
Var operator/(double a, Var b) { return owner(b).div(owner(b).scalar(a), b); }

Var exp(Var a) { return owner(a).exp(a); }
Var log(Var a) { return owner(a).log(a); }
Var pow(Var a, double exponent) { return owner(a).pow(a, exponent); }
Var tanh(Var a) { return owner(a).tanh(a); }
Var relu(Var a) { return owner(a).relu(a); }
Var abs(Var a) { return owner(a).abs(a); }
Var sum(Var a) { return owner(a).sum(a); }
Var dot(Var a, Var b) { return owner(a).dot(a, b); }
Var logsumexp(Var a) { return owner(a).logsumexp(a); }
Var matmul(Var a, Var b) { return owner(a).matmul(a, b); }

Var softplus(Var a) {
  Graph& g = owner(a);
  return g.log_add_exp(a, g.scalar(0.0));
}

double finite_difference_check(const std::function<Var(Graph&, Var)>& fn,
                               std::span<const double> point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");
  const Shape shape = Shape::column(point.size());

  std::vector<double> analytic;
  {
    Graph g;
    const Var x = g.leaf(point, shape);
    const Var y = fn(g, x);
    if (!std::isfinite(y.item())) {
      throw NumericalError("finite_difference_check: non-finite function value");
    }
    analytic = g.grad(y, std::span<const Var>(&x, 1))[0].to_vector();
  }

  auto eval_at = [&](const std::vector<double>& p) {
    Graph g;
    const Var x = g.leaf(p, shape);
    const double v = fn(g, x).item();
    if (!std::isfinite(v)) {
      throw NumericalError("finite_difference_check: non-finite function value");
    }
    return v;
  };

  double worst = 0.0;
  std::vector<double> p(point.begin(), point.end());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double fp = eval_at(p);
    p[i] = orig - step;
    const double fm = eval_at(p);
    p[i] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / std::max(std::abs(analytic[i]), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace metadiv::ad
