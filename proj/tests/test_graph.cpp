#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "graph.hpp"
#include "rng.hpp"

using namespace lbsac;

namespace {

Tensor random_tensor(int r, int c, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (auto& v : t.data) v = static_cast<float>(rng.next_uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("forward: matmul of ones") {
  Graph g;
  Value a = g.leaf(Tensor::full(2, 3, 1.0f));
  Value b = g.leaf(Tensor::full(3, 1, 1.0f));
  const Tensor& out = g.eval(g.matmul(a, b));
  REQUIRE(out.rows == 2);
  REQUIRE(out.cols == 1);
  CHECK(out.data[0] == 3.0f);
  CHECK(out.data[1] == 3.0f);
}

TEST_CASE("forward: tanh at zero") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(0.0f));
  CHECK(g.eval(g.tanh(x)).data[0] == 0.0f);
}

TEST_CASE("forward: layernorm of a constant row is zero") {
  Graph g;
  Value x = g.leaf(Tensor::full(1, 8, 3.25f));
  const Tensor& out = g.eval(g.layernorm(x));
  for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("forward: shape mismatch raises a structured error") {
  Graph g;
  Value a = g.leaf(Tensor::zeros(2, 3));
  Value b = g.leaf(Tensor::zeros(4, 1));
  CHECK_THROWS_WITH_AS(g.matmul(a, b),
                       "matmul: inner dimensions mismatch: 2x3 * 4x1", GraphError);
  CHECK_THROWS_AS(g.add(a, b), GraphError);
}

TEST_CASE("forward: re-evaluation is bit-identical") {
  RngStream rng(7, 0);
  Graph g;
  Value x = g.leaf(random_tensor(5, 4, rng));
  Value w = g.leaf(random_tensor(4, 3, rng));
  Value y = g.sum(g.tanh(g.matmul(x, w)));
  const Tensor first = g.eval(y);
  Graph g2;
  Value x2 = g2.leaf(g.eval(x));
  Value w2 = g2.leaf(g.eval(w));
  const Tensor second = g2.eval(g2.sum(g2.tanh(g2.matmul(x2, w2))));
  CHECK(first.data == second.data);
}

TEST_CASE("backward: d/dx of x*x at 3 is 6") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(3.0f));
  Value y = g.mul(x, x);
  const Value wrt[] = {x};
  CHECK(g.backward(y, wrt)[0].data[0] == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("backward: d/dx tanh at 0 is 1") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(0.0f));
  Value y = g.tanh(x);
  const Value wrt[] = {x};
  CHECK(g.backward(y, wrt)[0].data[0] == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("backward: non-scalar root and foreign leaf are rejected") {
  Graph g;
  Value x = g.leaf(Tensor::zeros(2, 2));
  const Value wrt[] = {x};
  CHECK_THROWS_AS(g.backward(x, wrt), GraphError);

  Graph other;
  Value ox = other.leaf(Tensor::scalar(1.0f));
  Value y = g.sum(x);
  const Value bad[] = {ox};
  CHECK_THROWS_AS(g.backward(y, bad), GraphError);
}

TEST_CASE("backward: leaf with no path gets a zero gradient") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(2.0f));
  Value unused = g.leaf(Tensor::zeros(3, 2));
  Value y = g.square(x);
  const Value wrt[] = {unused};
  const Tensor gz = g.backward(y, wrt)[0];
  REQUIRE(gz.rows == 3);
  for (float v : gz.data) CHECK(v == 0.0f);
}

TEST_CASE("backward: linearity in the root") {
  RngStream rng(11, 0);
  Graph g;
  Value x = g.leaf(random_tensor(3, 3, rng));
  Value f = g.sum(g.tanh(x));
  Value h = g.sum(g.square(x));
  const double a = 0.7, b = -1.3;
  Value combo = g.add(g.scale(f, a), g.scale(h, b));
  const Value wrt[] = {x};
  const Tensor gc = g.backward(combo, wrt)[0];
  const Tensor gf = g.backward(f, wrt)[0];
  const Tensor gh = g.backward(h, wrt)[0];
  for (size_t i = 0; i < gc.data.size(); i++) {
    CHECK(gc.data[i] ==
          doctest::Approx(a * gf.data[i] + b * gh.data[i]).epsilon(1e-5));
  }
}

// every primitive, checked against central differences in the f64 shadow path
TEST_CASE("backward: per-op finite-difference sweep") {
  RngStream rng(23, 0);
  const double eps = 1e-5;

  const auto check = [&](const char* name, auto build, Tensor a, Tensor b,
                         bool has_b = true) {
    CAPTURE(name);
    Graph g;
    Value va = g.leaf(a);
    Value vb = has_b ? g.leaf(b) : Value{};
    Value root = build(g, va, vb);
    for (Value leaf : {va, vb}) {
      if (!leaf.valid()) continue;
      const auto rep = g.finite_diff_check(root, leaf, eps);
      CHECK(rep.max_rel_error < 1e-3);
      CHECK(rep.nan_count == 0);
    }
  };

  Tensor a34 = random_tensor(3, 4, rng);
  Tensor b34 = random_tensor(3, 4, rng, 0.5, 2.0);  // positive: div/log/sqrt-safe
  Tensor a43 = random_tensor(4, 3, rng);

  check("matmul", [](Graph& g, Value a, Value b) { return g.sum(g.tanh(g.matmul(a, b))); },
        a34, a43);
  check("matmul_ta", [](Graph& g, Value a, Value b) { return g.sum(g.matmul(a, b, true, false)); },
        a34, random_tensor(3, 2, rng));
  check("matmul_tb", [](Graph& g, Value a, Value b) { return g.sum(g.matmul(a, b, false, true)); },
        a34, random_tensor(2, 4, rng));
  check("transpose", [](Graph& g, Value a, Value) { return g.sum(g.square(g.transpose(a))); },
        a34, {}, false);
  check("add", [](Graph& g, Value a, Value b) { return g.sum(g.square(g.add(a, b))); }, a34, b34);
  check("sub", [](Graph& g, Value a, Value b) { return g.sum(g.square(g.sub(a, b))); }, a34, b34);
  check("mul", [](Graph& g, Value a, Value b) { return g.sum(g.tanh(g.mul(a, b))); }, a34, b34);
  check("div", [](Graph& g, Value a, Value b) { return g.sum(g.tanh(g.div(a, b))); }, a34, b34);
  check("scale", [](Graph& g, Value a, Value) { return g.sum(g.scale(a, -2.5)); }, a34, {}, false);
  check("add_scalar", [](Graph& g, Value a, Value) { return g.sum(g.square(g.add_scalar(a, 0.3))); },
        a34, {}, false);
  check("tanh", [](Graph& g, Value a, Value) { return g.sum(g.tanh(a)); }, a34, {}, false);
  check("relu", [](Graph& g, Value a, Value) { return g.sum(g.relu(a)); }, a34, {}, false);
  check("exp", [](Graph& g, Value a, Value) { return g.sum(g.exp(a)); }, a34, {}, false);
  check("log", [](Graph& g, Value a, Value) { return g.sum(g.log(a)); }, b34, {}, false);
  check("square", [](Graph& g, Value a, Value) { return g.sum(g.square(a)); }, a34, {}, false);
  check("sqrt", [](Graph& g, Value a, Value) { return g.sum(g.sqrt(a)); }, b34, {}, false);
  check("clamp", [](Graph& g, Value a, Value) { return g.sum(g.clamp(a, -0.5, 0.5)); },
        a34, {}, false);
  check("sum0", [](Graph& g, Value a, Value) { return g.sum(g.square(g.sum(a, 0))); },
        a34, {}, false);
  check("sum1", [](Graph& g, Value a, Value) { return g.sum(g.square(g.sum(a, 1))); },
        a34, {}, false);
  check("mean", [](Graph& g, Value a, Value) { return g.square(g.mean(a)); }, a34, {}, false);
  check("mean0", [](Graph& g, Value a, Value) { return g.sum(g.square(g.mean(a, 0))); },
        a34, {}, false);
  check("min0", [](Graph& g, Value a, Value) { return g.sum(g.min_axis(a, 0)); },
        a34, {}, false);
  check("min1", [](Graph& g, Value a, Value) { return g.sum(g.square(g.min_axis(a, 1))); },
        a34, {}, false);
  check("broadcast", [](Graph& g, Value a, Value) {
          return g.sum(g.tanh(g.broadcast_to(a, 6, 4)));
        }, random_tensor(1, 4, rng), {}, false);
  check("broadcast_scalar", [](Graph& g, Value a, Value) {
          return g.sum(g.square(g.broadcast_to(a, 3, 5)));
        }, random_tensor(1, 1, rng), {}, false);
  check("slice", [](Graph& g, Value a, Value) {
          return g.sum(g.square(g.slice(a, 1, 1, 2)));
        }, a34, {}, false);
  check("slice0", [](Graph& g, Value a, Value) {
          return g.sum(g.square(g.slice(a, 0, 1, 2)));
        }, a34, {}, false);
  check("concat0", [](Graph& g, Value a, Value b) {
          return g.sum(g.tanh(g.concat(a, b, 0)));
        }, a34, b34);
  check("concat1", [](Graph& g, Value a, Value b) {
          return g.sum(g.tanh(g.concat(a, b, 1)));
        }, a34, b34);
  check("gather", [](Graph& g, Value a, Value) {
          return g.sum(g.square(g.gather_rows(a, {2, 0, 2})));
        }, a34, {}, false);
  check("layernorm", [](Graph& g, Value a, Value) { return g.sum(g.tanh(g.layernorm(a))); },
        a34, {}, false);
}

TEST_CASE("finite_diff_check: exact for linear functions") {
  RngStream rng(5, 0);
  Graph g;
  Value x = g.leaf(random_tensor(4, 4, rng));
  Value w = g.leaf(random_tensor(4, 2, rng));
  Value y = g.sum(g.matmul(x, w));
  const auto rep = g.finite_diff_check(y, x, 1e-3);
  CHECK(rep.max_rel_error < 1e-8);
  CHECK(rep.compared == 16);
}

TEST_CASE("finite_diff_check: relu kink at exactly zero is excluded") {
  Graph g;
  Tensor t(1, 3);
  t.data = {0.0f, 1.0f, -1.0f};
  Value x = g.leaf(t);
  Value y = g.sum(g.relu(x));
  const auto rep = g.finite_diff_check(y, x, 1e-3);
  CHECK(rep.excluded_kinks == 1);
  CHECK(rep.compared == 2);
  CHECK(rep.max_rel_error < 1e-8);
}

TEST_CASE("finite_diff_check: random 3-layer MLP under 1e-3") {
  RngStream rng(41, 0);
  for (int trial = 0; trial < 3; trial++) {
    Graph g;
    const int in = 5, hid = 16, batch = 4;
    Value x = g.leaf(random_tensor(batch, in, rng));
    Value h = x;
    std::vector<Value> params;
    int prev = in;
    for (int l = 0; l < 3; l++) {
      Value w = g.leaf(random_tensor(prev, hid, rng, -0.4, 0.4));
      Value b = g.leaf(random_tensor(1, hid, rng, -0.1, 0.1));
      params.push_back(w);
      params.push_back(b);
      h = g.relu(g.add(g.matmul(h, w), g.broadcast_to(b, batch, hid)));
      prev = hid;
    }
    Value wout = g.leaf(random_tensor(prev, 1, rng, -0.4, 0.4));
    params.push_back(wout);
    Value y = g.mean(g.matmul(h, wout));
    for (Value p : params) {
      const auto rep = g.finite_diff_check(y, p, 1e-3);
      CHECK(rep.max_rel_error < 1e-3);
    }
    const auto repx = g.finite_diff_check(y, x, 1e-3);
    CHECK(repx.max_rel_error < 1e-3);
  }
}

TEST_CASE("grad_of_grad: d2/dx2 of x^3 at 2 is 12") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(2.0f));
  Value y = g.mul(g.mul(x, x), x);
  const Value outer[] = {x};
  CHECK(grad_of_grad(g, y, x, outer)[0].data[0] == doctest::Approx(12.0).epsilon(1e-5));
}

TEST_CASE("grad_of_grad: d/dw of d/dx (w*x) is 1") {
  Graph g;
  Value w = g.leaf(Tensor::scalar(3.0f));
  Value x = g.leaf(Tensor::scalar(-2.0f));
  Value y = g.mul(w, x);
  const Value outer[] = {w};
  CHECK(grad_of_grad(g, y, x, outer)[0].data[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("grad_of_grad: cubic polynomial matches analytic second derivative") {
  // f(x) = 2x^3 - x^2 + 0.5x,  f'' = 12x - 2
  for (float x0 : {-1.5f, -0.2f, 0.0f, 0.8f, 2.0f}) {
    Graph g;
    Value x = g.leaf(Tensor::scalar(x0));
    Value y = g.add(g.scale(g.mul(g.mul(x, x), x), 2.0),
                    g.add(g.scale(g.square(x), -1.0), g.scale(x, 0.5)));
    const Value outer[] = {x};
    const double got = grad_of_grad(g, y, x, outer)[0].data[0];
    CHECK(got == doctest::Approx(12.0 * x0 - 2.0).epsilon(1e-5));
  }
}

TEST_CASE("grad_of_grad: pairwise action-gradient dot for two linear critics") {
  // q_i = a . w_i for a single action row; s = 2 * (w1 . w2);
  // d s / d w1 = 2 w2.
  RngStream rng(17, 0);
  Graph g;
  Tensor w1t = random_tensor(3, 1, rng), w2t = random_tensor(3, 1, rng);
  Value a = g.leaf(random_tensor(1, 3, rng));
  Value w1 = g.leaf(w1t);
  Value w2 = g.leaf(w2t);
  Value q1 = g.matmul(a, w1);
  Value q2 = g.matmul(a, w2);

  const Value wrt_a[] = {a};
  Value g1 = g.gradient_nodes(q1, wrt_a)[0];
  Value g2 = g.gradient_nodes(q2, wrt_a)[0];
  Value s = g.scale(g.sum(g.mul(g1, g2)), 2.0);  // both ordered pairs

  CHECK(g.eval(s).data[0] ==
        doctest::Approx(2.0 * (w1t.data[0] * w2t.data[0] + w1t.data[1] * w2t.data[1] +
                               w1t.data[2] * w2t.data[2]))
            .epsilon(1e-5));
  const Value wrt_w[] = {w1};
  const Tensor ds = g.backward(s, wrt_w)[0];
  for (int i = 0; i < 3; i++) {
    CHECK(ds.data[i] == doctest::Approx(2.0 * w2t.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("leaves: rebinding requires matching shape and reaches new results") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(1.0f));
  Value y = g.square(x);
  CHECK(g.eval(y).data[0] == 1.0f);
  g.set_leaf(x, Tensor::scalar(3.0f));
  CHECK(g.eval(y).data[0] == 9.0f);
  CHECK_THROWS_AS(g.set_leaf(x, Tensor::zeros(2, 2)), GraphError);
  CHECK_THROWS_AS(g.eval(Value{g.leaf(1, 1).id, &g}), GraphError);  // unbound leaf
}
