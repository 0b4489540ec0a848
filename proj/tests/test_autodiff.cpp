#include "doctest.h"

#include <cmath>
#include <random>

#include "metadiv/autodiff.hpp"
#include "metadiv/errors.hpp"

using namespace metadiv::ad;

namespace {

std::vector<Var> grad1(Graph& g, Var y, Var x) { return g.grad(y, std::span<const Var>(&x, 1)); }

// Hessian row i by differentiating the i-th gradient component again,
// compared with central differences of the analytic gradient.
double hessian_fd_error(const std::function<Var(Graph&, Var)>& fn, const std::vector<double>& p,
                        double h) {
  const std::size_t n = p.size();
  auto gradient_at = [&](const std::vector<double>& q) {
    Graph g;
    Var x = g.column(q);
    return grad1(g, fn(g, x), x)[0].to_vector();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Graph g;
    Var x = g.column(p);
    Var gx = grad1(g, fn(g, x), x)[0];
    Var gi = g.slice(gx, i, Shape::scalar());
    auto hrow = grad1(g, gi, x)[0].to_vector();
    for (std::size_t j = 0; j < n; ++j) {
      auto qp = p, qm = p;
      qp[j] += h;
      qm[j] -= h;
      const double fd = (gradient_at(qp)[i] - gradient_at(qm)[i]) / (2 * h);
      worst = std::max(worst, std::abs(hrow[j] - fd) / std::max(std::abs(hrow[j]), 1.0));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("power rule and second derivative") {
  Graph g;
  Var x = g.scalar(3.0);
  Var y = x * x;
  CHECK(grad1(g, y, x)[0].item() == doctest::Approx(6.0).epsilon(1e-15));

  Graph g2;
  Var x2 = g2.scalar(2.0);
  Var cube = x2 * x2 * x2;
  Var d1 = grad1(g2, cube, x2)[0];
  Var d2 = grad1(g2, d1, x2)[0];
  CHECK(d1.item() == doctest::Approx(12.0).epsilon(1e-15));
  CHECK(d2.item() == doctest::Approx(12.0).epsilon(1e-15));
}

TEST_CASE("mixed exp/log partials agree with central differences") {
  auto fn = [](Graph& g, Var v) {
    Var x = g.slice(v, 0, Shape::scalar());
    Var y = g.slice(v, 1, Shape::scalar());
    return x * exp(y) + log(x);
  };
  const std::vector<double> p{1.5, 0.2};
  CHECK(finite_difference_check(fn, p, 1e-5) < 1e-6);
}

TEST_CASE("finite difference check is exact on quadratic forms") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01;
  std::vector<double> a(9), p(3);
  for (auto& v : a) v = n01(rng);
  for (auto& v : p) v = n01(rng);
  auto fn = [&](Graph& g, Var x) {
    Var m = g.leaf(a, {3, 3});
    return g.dot(x, matmul(m, x));
  };
  CHECK(finite_difference_check(fn, p, 1e-3) < 1e-8);
}

TEST_CASE("finite difference check rejects non-finite values and bad steps") {
  auto fn = [](Graph&, Var x) { return log(x - 10.0); };
  const std::vector<double> p{1.0};
  CHECK_THROWS_AS(finite_difference_check([](Graph&, Var x) { return sum(x); }, p, 0.0),
                  std::invalid_argument);
  // log of a negative number is NaN.
  CHECK_THROWS_AS(finite_difference_check([&](Graph& g, Var x) { return sum(fn(g, x)); }, p, 1e-4),
                  metadiv::NumericalError);
}

TEST_CASE("logsumexp symmetry and softmax gradient") {
  Graph g;
  Var v = g.column(std::vector<double>{0.7, 0.7});
  CHECK(logsumexp(v).item() == doctest::Approx(0.7 + std::log(2.0)).epsilon(1e-15));

  const std::vector<double> p{0.3, -1.2, 2.0, 0.5};
  auto fn = [](Graph&, Var x) { return logsumexp(x); };
  CHECK(finite_difference_check(fn, p, 1e-5) < 1e-7);

  Graph g2;
  Var x = g2.column(p);
  auto sm = grad1(g2, logsumexp(x), x)[0].to_vector();
  double z = 0;
  for (double q : p) z += std::exp(q);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(sm[i] == doctest::Approx(std::exp(p[i]) / z));
}

TEST_CASE("relu and abs use subderivative zero at the kink") {
  for (auto [x0, expect] : {std::pair{-1.0, 0.0}, {2.0, 1.0}, {0.0, 0.0}}) {
    Graph g;
    Var x = g.scalar(x0);
    CHECK(grad1(g, relu(x), x)[0].item() == expect);
  }
  Graph g;
  Var x = g.scalar(0.0);
  CHECK(grad1(g, abs(x), x)[0].item() == 0.0);
  Var xn = g.scalar(-3.0);
  CHECK(grad1(g, abs(xn), xn)[0].item() == -1.0);
}

TEST_CASE("second derivatives match analytic values on polynomial and exponential functions") {
  // f(x) = x^4 + exp(2x) - 3 x^2  => f'' = 12 x^2 + 4 exp(2x) - 6
  for (double x0 : {-1.3, 0.0, 0.4, 2.1}) {
    Graph g;
    Var x = g.scalar(x0);
    Var f = pow(x, 4.0) + exp(2.0 * x) - 3.0 * x * x;
    Var d1 = grad1(g, f, x)[0];
    Var d2 = grad1(g, d1, x)[0];
    const double expect = 12 * x0 * x0 + 4 * std::exp(2 * x0) - 6;
    CHECK(std::abs(d2.item() - expect) <= 1e-8 * std::max(1.0, std::abs(expect)));
  }
}

TEST_CASE("every primitive has a correct second-order rule") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  std::vector<double> p(6);
  for (auto& v : p) v = u(rng);

  const std::vector<std::pair<const char*, std::function<Var(Graph&, Var)>>> cases = {
      {"add/sub/mul/div",
       [](Graph& g, Var x) {
         Var a = g.slice(x, 0, Shape::column(3));
         Var b = g.slice(x, 3, Shape::column(3));
         return sum((a * b - a / b + a) * (a + b));
       }},
      {"scalar broadcast",
       [](Graph& g, Var x) {
         Var s = g.slice(x, 0, Shape::scalar());
         Var v = g.slice(x, 1, Shape::column(5));
         return sum(s * v * v / s + (s - v) * s);
       }},
      {"exp/log/pow/tanh",
       [](Graph&, Var x) { return sum(exp(0.3 * x) * log(x) + pow(x, 2.5) + tanh(x) * x); }},
      {"relu/abs away from kinks",
       [](Graph&, Var x) { return sum(relu(x - 0.1) * relu(x - 0.1) + abs(x - 5.0) * x); }},
      {"dot/logsumexp/max",
       [](Graph& g, Var x) {
         return g.dot(x, x) * logsumexp(x * x) + g.max_reduce(x * x * x);
       }},
      {"log_add_exp",
       [](Graph& g, Var x) {
         Var a = g.slice(x, 0, Shape::column(3));
         Var b = g.slice(x, 3, Shape::column(3));
         return sum(g.log_add_exp(a * a, b * 2.0) * a);
       }},
      {"matmul/transpose/reshape",
       [](Graph& g, Var x) {
         Var m = g.reshape(x, {2, 3});
         Var mt = g.transpose(m);
         Var p2 = matmul(m, mt);
         return sum(p2 * p2);
       }},
      {"logsumexp_cols",
       [](Graph& g, Var x) {
         Var m = g.reshape(x * x, {3, 2});
         Var r = g.logsumexp_cols(m);
         return sum(r * r);
       }},
      {"slice/embed/concat/broadcast",
       [](Graph& g, Var x) {
         Var a = g.slice(x, 1, Shape::column(2));
         Var e = g.embed(a * a, 2, Shape::column(6));
         std::vector<Var> parts{e, a, g.slice(x, 0, Shape::scalar())};
         Var c = g.concat(parts);
         Var b = g.broadcast(g.slice(x, 5, Shape::scalar()), Shape::column(9));
         return sum(c * c * b);
       }},
      {"scatter with overlap and repeated slices",
       [](Graph& g, Var x) {
         Var a = g.slice(x, 0, Shape::column(4));
         Var b = g.slice(x, 2, Shape::column(4));
         std::vector<Var> parts{a * a, b, g.slice(x, 3, Shape::column(2)) * 2.0};
         std::vector<std::size_t> offsets{0, 1, 4};
         Var s = g.scatter(parts, offsets, Shape::column(7));
         return sum(s * s * g.slice(x, 1, Shape::scalar()));
       }},
  };
  for (const auto& [name, fn] : cases) {
    const std::string label = name;
    CAPTURE(label);
    CHECK(finite_difference_check(fn, p, 1e-6) < 1e-6);
    CHECK(hessian_fd_error(fn, p, 1e-5) < 1e-6);
  }
}

TEST_CASE("gradient of a sum is the sum of gradients, exactly") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(4), c(4);
    for (auto& v : p) v = n01(rng);
    for (auto& v : c) v = n01(rng);
    Graph g;
    Var x = g.column(p);
    Var f1 = sum(exp(x));
    Var f2 = sum(x * g.column(c));
    auto g1 = grad1(g, f1, x)[0].to_vector();
    auto g2 = grad1(g, f2, x)[0].to_vector();
    auto gs = grad1(g, f1 + f2, x)[0].to_vector();
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(gs[i] == g1[i] + g2[i]);

    // With several paths per term the accumulation order differs, so only
    // rounding-level agreement is expected.
    Var h1 = sum(exp(x) * x);
    Var h2 = g.dot(x, x) * 3.0;
    auto a1 = grad1(g, h1, x)[0].to_vector();
    auto a2 = grad1(g, h2, x)[0].to_vector();
    auto as = grad1(g, h1 + h2, x)[0].to_vector();
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(as[i] == doctest::Approx(a1[i] + a2[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("unreachable wrt entries get exact zeros") {
  Graph g;
  Var x = g.column(std::vector<double>{1.0, 2.0});
  Var y = g.scalar(5.0);
  Var f = sum(x * x);
  std::vector<Var> wrt{x, y};
  auto grads = g.grad(f, wrt);
  CHECK(grads[1].item() == 0.0);
  // Wrt created after the output is also unreachable.
  Var late = g.scalar(1.0);
  CHECK(grad1(g, f, late)[0].item() == 0.0);
  // Zero-derivative ops stop the flow completely.
  Var h = sum(g.detach(x) * g.step(x));
  auto gh = grad1(g, h, x)[0].to_vector();
  CHECK(gh[0] == 0.0);
  CHECK(gh[1] == 0.0);
}

TEST_CASE("replaying with identical leaves is bitwise identical") {
  Graph g;
  Var x = g.column(std::vector<double>{0.3, -0.8, 1.7});
  Var f = logsumexp(exp(x) * tanh(x)) + sum(pow(abs(x), 1.5));
  Var df = grad1(g, f, x)[0];
  const auto before = df.to_vector();
  const double fb = f.item();
  g.replay();
  CHECK(df.to_vector() == before);
  CHECK(f.item() == fb);

  g.set_leaf(x, std::vector<double>{0.4, -0.8, 1.7});
  g.replay();
  CHECK(f.item() != fb);
}

TEST_CASE("vjp with graph-valued seeds is differentiable in the seed") {
  Graph g;
  Var x = g.column(std::vector<double>{0.5, 1.5});
  Var w = g.column(std::vector<double>{2.0, -1.0});
  Var y = x * x;  // dy_i/dx_i = 2 x_i
  std::vector<Var> outs{y}, seeds{w}, wrt{x};
  Var v = g.vjp(outs, seeds, wrt)[0];  // 2 x * w
  CHECK(v.to_vector() == std::vector<double>{2.0, -3.0});
  Var dw = grad1(g, sum(v), w)[0];  // 2 x
  CHECK(dw.to_vector() == std::vector<double>{1.0, 3.0});
}

TEST_CASE("error paths") {
  Graph g, other;
  Var x = g.column(std::vector<double>{1.0, 2.0});
  Var z = other.scalar(1.0);
  CHECK_THROWS_AS(grad1(g, x, x), std::invalid_argument);
  CHECK_THROWS_AS(grad1(g, sum(x), z), std::invalid_argument);
  CHECK_THROWS_AS(g.add(x, g.column(std::vector<double>{1, 2, 3})), std::invalid_argument);
  CHECK_THROWS_AS(g.matmul(x, x), std::invalid_argument);
  CHECK_THROWS_AS(g.slice(x, 1, Shape::column(2)), std::out_of_range);
  CHECK_THROWS_AS(x.item(), std::invalid_argument);
  CHECK_THROWS_AS(g.leaf(std::vector<double>{1.0}, Shape::column(2)), std::invalid_argument);
}

TEST_CASE("supported primitive list covers the required set") {
  const auto prims = supported_primitives();
  for (const char* need : {"add", "sub", "mul", "div", "neg", "exp", "log", "pow", "tanh", "relu",
                           "abs", "sum", "dot", "max", "logsumexp"}) {
    CAPTURE(need);
    CHECK(std::find(prims.begin(), prims.end(), need) != prims.end());
  }
}
