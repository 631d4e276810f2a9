#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ccn/attention.hpp"
#include "ccn/autodiff.hpp"
#include "ccn/gradcheck.hpp"

using namespace ccn;
using Catch::Approx;

TEST_CASE("forward values of basic ops") {
  Graph g;
  const NodeId x = g.input("x");
  const NodeId y = g.sigmoid(x);
  CHECK(g.forward(y, {{"x", Tensor::scalar(0.0)}}).item() == 0.5);

  Graph g2;
  const NodeId a = g2.input("a");
  const NodeId r = g2.log(g2.exp(a));
  CHECK(g2.forward(r, {{"a", Tensor::scalar(1.7)}}).item() == Approx(1.7).epsilon(1e-15));

  Graph g3;
  const NodeId sm = g3.softmax(g3.constant(Tensor::column({1.0, 0.0})));
  const Tensor& w = g3.forward(sm);
  const double e = std::exp(1.0);
  CHECK(w[0] == Approx(e / (e + 1.0)).epsilon(1e-14));
  CHECK(w[1] == Approx(1.0 / (e + 1.0)).epsilon(1e-14));
  CHECK(w[0] == Approx(0.7311).margin(1e-4));
}

TEST_CASE("softmax stays finite for large logits") {
  Graph g;
  const NodeId sm = g.softmax(g.constant(Tensor::column({1000.0, 999.0, -1000.0})));
  const Tensor& w = g.forward(sm);
  for (double v : w.data) CHECK(std::isfinite(v));
  CHECK(w[0] + w[1] + w[2] == Approx(1.0));
}

TEST_CASE("hand-derived gradients") {
  SECTION("x^2 at 3") {
    Graph g;
    const NodeId x = g.input("x");
    const NodeId f = g.mul(x, x);
    g.forward(f, {{"x", Tensor::scalar(3.0)}});
    CHECK(g.backward(f).of(x).item() == 6.0);
  }
  SECTION("sigmoid at 0") {
    Graph g;
    const NodeId x = g.input("x");
    const NodeId f = g.sigmoid(x);
    g.forward(f, {{"x", Tensor::scalar(0.0)}});
    CHECK(g.backward(f).of(x).item() == 0.25);
  }
  SECTION("cos(a - b)") {
    Graph g;
    const NodeId a = g.input("a");
    const NodeId b = g.input("b");
    const NodeId f = g.cos_diff(a, b);
    g.forward(f, {{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(2.0)}});
    const GradStore gs = g.backward(f);
    CHECK(gs.of(a).item() == Approx(-std::sin(-1.0)).epsilon(1e-14));
    CHECK(gs.of(a).item() == Approx(0.8415).margin(1e-4));
    CHECK(gs.of(b).item() == Approx(std::sin(-1.0)).epsilon(1e-14));
  }
}

TEST_CASE("finite-difference check on simple functions") {
  SECTION("smooth polynomial") {
    Graph g;
    const NodeId x = g.input("x");
    const NodeId f = g.mul(x, x);
    const GradCheckReport r = finite_diff_check(g, f, {{"x", Tensor::scalar(3.0)}});
    CHECK(r.coords == 1);
    CHECK(r.max_rel_error < 1e-6);
  }
  SECTION("dead branch") {
    Graph g;
    const NodeId w = g.input("w");
    const NodeId f = g.sum(g.mul(w, g.scalar(0.0)));
    g.forward(f, {{"w", Tensor::scalar(1.3)}});
    CHECK(g.backward(f).of(w).item() == 0.0);
    const GradCheckReport r = finite_diff_check(g, f, {{"w", Tensor::scalar(1.3)}});
    CHECK(r.max_rel_error == 0.0);
  }
}

TEST_CASE("gradient error metric") {
  GradCheckOptions opt;
  CHECK(gradient_error(1.0, 1.0 + 1e-6, opt) < 1e-5);
  CHECK(gradient_error(0.0, 5e-7, opt) < opt.tolerance);   // below the absolute floor
  CHECK(gradient_error(1.0, 1.1, opt) > opt.tolerance);
}

TEST_CASE("matmul gradients in all transpose modes") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  auto rand_tensor = [&](std::size_t r, std::size_t c) {
    Tensor t(r, c);
    for (double& v : t.data) v = nd(rng);
    return t;
  };
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      Graph g;
      const NodeId a = g.input("a");
      const NodeId b = g.input("b");
      const NodeId f = g.sum(g.sigmoid(g.matmul(a, b, ta != 0, tb != 0)));
      Bindings in{{"a", ta ? rand_tensor(4, 3) : rand_tensor(3, 4)},
                  {"b", tb ? rand_tensor(2, 4) : rand_tensor(4, 2)}};
      const GradCheckReport r = finite_diff_check(g, f, in);
      CHECK(r.coords == 20);
      CHECK(r.passed(1e-6));
    }
  }
}

TEST_CASE("add_bias broadcasts over rows") {
  Graph g;
  const NodeId a = g.input("a");
  const NodeId b = g.input("b");
  const NodeId y = g.add_bias(a, b);
  const Tensor& out = g.forward(y, {{"a", Tensor::matrix(2, 2, {1, 2, 3, 4})},
                                    {"b", Tensor::column({10, 20})}});
  CHECK(out.data == std::vector<double>{11, 22, 13, 24});
  const NodeId f = g.sum(g.mul(y, y));
  const GradCheckReport r = finite_diff_check(
      g, f, {{"a", Tensor::matrix(2, 2, {1, 2, 3, 4})}, {"b", Tensor::column({0.1, -0.2})}});
  CHECK(r.passed(1e-6));
}

TEST_CASE("fused attention matches the composite form") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (std::size_t heads : {1u, 2u, 4u}) {
    MhtaParams p("att", 4, heads, rng);
    Tensor q(4, 1);
    Tensor s(5, 4);
    for (double& v : q.data) v = nd(rng);
    for (double& v : s.data) v = nd(rng);
    Graph g;
    const NodeId qn = g.input("q");
    const NodeId sn = g.input("s");
    const NodeId fused = mhta_rows(g, qn, sn, 5, p);
    const NodeId comp = mhta_rows_composite(g, qn, sn, 5, p);
    const Tensor w = Tensor::column({0.3, -1.2, 0.7, 2.0});
    const NodeId ff = g.sum(g.mul(fused, g.constant(w)));
    const NodeId fc = g.sum(g.mul(comp, g.constant(w)));
    const Bindings in{{"q", q}, {"s", s}};
    g.forward(in);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(g.value(fused)[i] == Approx(g.value(comp)[i]).epsilon(1e-12));
    }
    const GradStore gf = g.backward(ff);
    const GradStore gc = g.backward(fc);
    for (NodeId leaf : {qn, sn, g.param(p.wq), g.param(p.wk), g.param(p.wv)}) {
      const Tensor a = gf.of(leaf);
      const Tensor b = gc.of(leaf);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Approx(b[i]).margin(1e-12));
    }
    std::vector<Parameter*> params{&p.wq, &p.wk, &p.wv};
    CHECK(finite_diff_check(g, ff, in, params).passed(1e-6));
  }
}

TEST_CASE("graph errors are descriptive") {
  SECTION("unbound input") {
    Graph g;
    const NodeId x = g.input("x");
    CHECK_THROWS_WITH(g.forward(g.exp(x)), Catch::Matchers::ContainsSubstring("unbound input 'x'"));
  }
  SECTION("backward before forward") {
    Graph g;
    const NodeId x = g.scalar(1.0);
    CHECK_THROWS_AS(g.backward(x), GraphError);
  }
  SECTION("non-scalar root") {
    Graph g;
    const NodeId x = g.constant(Tensor::column({1.0, 2.0}));
    g.forward(x);
    CHECK_THROWS_AS(g.backward(x), GraphError);
  }
  SECTION("shape mismatch names the node") {
    Graph g;
    const NodeId a = g.constant(Tensor::column({1.0, 2.0}));
    const NodeId b = g.constant(Tensor::column({1.0, 2.0, 3.0}));
    g.label(g.add(a, b), "bad_sum");
    CHECK_THROWS_WITH(g.forward(), Catch::Matchers::ContainsSubstring("bad_sum"));
  }
}

TEST_CASE("memoized leaves") {
  Parameter p{"w", Tensor(3, 2, 1.0)};
  Graph g;
  CHECK(g.param(p) == g.param(p));
  CHECK(g.gather(p, 1) == g.gather(p, 1));
  CHECK(g.gather(p, 1) != g.gather(p, 2));
  CHECK(g.zeros(2, 1) == g.zeros(2, 1));
}

// Random composite graphs: every op appears, gradients must match finite
// differences everywhere away from relu kinks.
namespace {

struct RandomGraph {
  Graph g;
  Bindings inputs;
  NodeId root = 0;
};

RandomGraph random_graph(std::mt19937_64& rng) {
  RandomGraph rg;
  Graph& g = rg.g;
  std::normal_distribution<double> nd(0.0, 0.7);
  std::uniform_int_distribution<int> pick(0, 14);
  const std::size_t n = 3;
  std::vector<NodeId> pool;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "x" + std::to_string(i);
    Tensor t(n, 1);
    for (double& v : t.data) v = nd(rng);
    rg.inputs[name] = t;
    pool.push_back(g.input(name));
  }
  Tensor m(n, n);
  for (double& v : m.data) v = nd(rng);
  rg.inputs["m"] = m;
  const NodeId mat = g.input("m");

  auto any = [&]() { return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]; };
  for (int step = 0; step < 8; ++step) {
    const NodeId a = any();
    const NodeId b = any();
    NodeId r = 0;
    switch (pick(rng)) {
      case 0: r = g.add(a, b); break;
      case 1: r = g.sub(a, b); break;
      case 2: r = g.mul(a, b); break;
      case 3: r = g.matmul(mat, a); break;
      case 4: r = g.matmul(mat, a, true); break;
      case 5: r = g.sigmoid(a); break;
      case 6: r = g.softplus(a); break;
      case 7: r = g.relu(a); break;
      case 8: r = g.softmax(a); break;
      case 9: r = g.cos_diff(a, b); break;
      case 10: r = g.exp(g.affine(g.sigmoid(a), 0.5)); break;
      case 11: r = g.log(g.affine(g.softplus(a), 1.0, 0.5)); break;
      case 12: r = g.slice_rows(g.concat({a, b}), 1, n); break;
      case 13: r = g.matmul(g.stack({a, b, a}), b, true); break;
      default: r = g.mul(g.sum(a), b); break;
    }
    pool.push_back(r);
  }
  std::vector<NodeId> tail(pool.end() - 3, pool.end());
  rg.root = g.sum(g.concat(std::move(tail)));
  return rg;
}

}  // namespace

TEST_CASE("random graphs pass the finite-difference check") {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    RandomGraph rg = random_graph(rng);
    const GradCheckReport r = finite_diff_check(rg.g, rg.root, rg.inputs);
    CHECK_FALSE(r.non_finite);
    worst = std::max(worst, r.max_rel_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gradients are linear in the root") {
  // d(2f + 3h) = 2 df + 3 dh
  Graph g;
  const NodeId x = g.input("x");
  const NodeId f = g.sum(g.sigmoid(x));
  const NodeId h = g.sum(g.softplus(x));
  const NodeId c = g.add(g.scale(f, 2.0), g.scale(h, 3.0));
  g.forward({{"x", Tensor::column({0.2, -1.0, 3.0})}});
  const Tensor gf = g.backward(f).of(x);
  const Tensor gh = g.backward(h).of(x);
  const Tensor gc = g.backward(c).of(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(gc[i] == Approx(2.0 * gf[i] + 3.0 * gh[i]));
}
