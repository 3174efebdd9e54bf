#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "peftlab/grad_check.hpp"
#include "peftlab/graph.hpp"
#include "peftlab/rng.hpp"

using namespace peftlab;

TEST_CASE("tensor shape and data invariants") {
  Tensor t = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 2);
  CHECK(t.numel() == 4);
  CHECK(t.at(1, 0) == 3.0);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimError);
  CHECK(Tensor::scalar(5.0).item() == 5.0);
}

TEST_CASE("matmul forward") {
  Graph g;
  Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var id = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const Tensor& r = g.value(g.matmul(a, id));
  CHECK(r.at(0, 0) == 1.0);
  CHECK(r.at(0, 1) == 2.0);
  CHECK(r.at(1, 0) == 3.0);
  CHECK(r.at(1, 1) == 4.0);

  Var row = g.constant(Tensor::matrix({{1, 2}}));
  Var col = g.constant(Tensor::matrix({{3}, {4}}));
  CHECK(g.value(g.matmul(row, col)).item() == doctest::Approx(11.0).epsilon(1e-15));

  Var bad = g.constant(Tensor::matrix({{1, 2, 3}}));
  CHECK_THROWS_AS(g.matmul(bad, col), DimError);
}

TEST_CASE("matmul backward matches the hand-derived value and the oracle") {
  Tensor a = Tensor::matrix({{1, 1}});
  Tensor b = Tensor::matrix({{2}, {5}});
  a.requires_grad = true;
  Graph g;
  g.backward(g.sum(g.matmul(g.leaf(a), g.constant(b))));
  REQUIRE(a.grad.has_value());
  CHECK((*a.grad)[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK((*a.grad)[1] == doctest::Approx(5.0).epsilon(1e-12));

  const Tensor numeric = finite_diff_grad(
      [&](const Tensor& probe) {
        Graph h;
        return h.value(h.sum(h.matmul(h.constant(probe), h.constant(b)))).item();
      },
      a, 1e-5);
  CHECK(max_rel_err(*a.grad, numeric.data()) < 1e-6);
}

TEST_CASE("elementwise add and mul") {
  Graph g;
  Var x = g.constant(Tensor::matrix({{2, 3}}));
  CHECK(g.value(g.mul(x, g.constant(Tensor::matrix({{1, 1}})))).at(0, 1) == 3.0);
  CHECK(g.value(g.add(x, g.constant(Tensor::matrix({{0, 0}})))).at(0, 0) == 2.0);
  const Tensor& prod = g.value(g.mul(x, g.constant(Tensor::matrix({{4, 5}}))));
  CHECK(prod.at(0, 0) == 8.0);
  CHECK(prod.at(0, 1) == 15.0);
  CHECK_THROWS_AS(g.add(x, g.constant(Tensor::matrix({{1, 2, 3}}))), DimError);
}

TEST_CASE("transpose") {
  Graph g;
  const Tensor& t = g.value(g.transpose(g.constant(Tensor::matrix({{1, 2}, {3, 4}}))));
  CHECK(t.at(0, 1) == 3.0);
  CHECK(t.at(1, 0) == 2.0);
  const Tensor& col = g.value(g.transpose(g.constant(Tensor::matrix({{1, 2, 3}}))));
  CHECK(col.shape() == std::vector<std::size_t>{3, 1});
  CHECK_THROWS_AS(g.transpose(g.constant(Tensor::scalar(1.0))), DimError);

  Rng rng(3);
  Tensor m = Tensor::randn({3, 5}, rng);
  Graph h;
  Var mm = h.constant(m);
  CHECK(max_abs_diff(h.value(h.transpose(h.transpose(mm))), m) == 0.0);
}

TEST_CASE("transpose distributes over matmul") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  Graph g;
  const Tensor& lhs = g.value(g.transpose(g.matmul(g.constant(a), g.constant(b))));
  const Tensor& rhs =
      g.value(g.matmul(g.transpose(g.constant(b)), g.transpose(g.constant(a))));
  CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("broadcast_rows") {
  Graph g;
  const Tensor& r = g.value(g.broadcast_rows(g.constant(Tensor::matrix({{1, 2}})), 3));
  CHECK(r.rows() == 3);
  CHECK(r.at(2, 0) == 1.0);
  CHECK(r.at(2, 1) == 2.0);
  CHECK(g.value(g.broadcast_rows(g.constant(Tensor::matrix({{5}})), 1)).item() == 5.0);
  CHECK_THROWS_AS(g.broadcast_rows(g.constant(Tensor::matrix({{1}, {2}})), 3), DimError);
}

TEST_CASE("broadcast_rows backward sums incoming rows") {
  Tensor v = Tensor::matrix({{1, 2}});
  v.requires_grad = true;
  Graph g;
  Var out = g.broadcast_rows(g.leaf(v), 2);
  // Upstream [[1,1],[2,2]] via a weighted sum.
  g.backward(g.sum(g.mul(out, g.constant(Tensor::matrix({{1, 1}, {2, 2}})))));
  REQUIRE(v.grad.has_value());
  CHECK((*v.grad)[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK((*v.grad)[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("broadcast_rows gradient equals the ones-matrix matmul formulation") {
  Rng rng(11);
  Tensor v1 = Tensor::randn({1, 4}, rng);
  Tensor v2 = v1;
  v1.requires_grad = v2.requires_grad = true;
  const Tensor w = Tensor::randn({5, 4}, rng);
  {
    Graph g;
    g.backward(g.sum(g.mul(g.broadcast_rows(g.leaf(v1), 5), g.constant(w))));
  }
  {
    Graph g;
    Var ones = g.constant(Tensor::ones({5, 1}));
    g.backward(g.sum(g.mul(g.matmul(ones, g.leaf(v2)), g.constant(w))));
  }
  REQUIRE(v1.grad.has_value());
  REQUIRE(v2.grad.has_value());
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK((*v1.grad)[i] == doctest::Approx((*v2.grad)[i]).epsilon(1e-12));
  }
}

TEST_CASE("activations") {
  Graph g;
  const Tensor& r = g.value(g.relu(g.constant(Tensor::matrix({{-1, 0, 2}}))));
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(0, 1) == 0.0);
  CHECK(r.at(0, 2) == 2.0);

  const Tensor& sm = g.value(g.softmax_rows(g.constant(Tensor::matrix({{0, 0}}))));
  CHECK(sm.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(sm.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  CHECK(g.value(g.gelu(g.constant(Tensor::scalar(0.0)))).item() == 0.0);
}

TEST_CASE("softmax rows sum to one and stay finite on large inputs") {
  Rng rng(13);
  Tensor big = Tensor::randn({4, 6}, rng, 300.0);
  Graph g;
  const Tensor& sm = g.value(g.softmax_rows(g.constant(big)));
  CHECK(sm.all_finite());
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += sm.at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("causal softmax zeroes future keys") {
  Graph g;
  Rng rng(17);
  const Tensor& p = g.value(g.causal_softmax_rows(g.constant(Tensor::randn({3, 3}, rng))));
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(0, 2) == 0.0);
  CHECK(p.at(1, 2) == 0.0);
  CHECK(p.at(0, 0) == 1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += p.at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("reductions") {
  Graph g;
  const Tensor& m = g.value(g.mean_rows(g.constant(Tensor::matrix({{1, 3}, {3, 5}}))));
  CHECK(m.at(0, 0) == 2.0);
  CHECK(m.at(0, 1) == 4.0);
  CHECK(g.value(g.frobenius_norm(g.constant(Tensor::matrix({{3, 4}})))).item() == doctest::Approx(5.0));
  CHECK(g.value(g.sum(g.constant(Tensor::zeros({2, 3})))).item() == 0.0);
}

TEST_CASE("backward populates leaves and accumulates across calls") {
  Tensor x = Tensor::row({1, 2, 3});
  x.requires_grad = true;
  Graph g;
  Var loss = g.sum(g.leaf(x));
  g.backward(loss);
  REQUIRE(x.grad.has_value());
  CHECK((*x.grad)[0] == 1.0);
  CHECK((*x.grad)[2] == 1.0);
  g.backward(loss);  // accumulates without reset
  CHECK((*x.grad)[0] == 2.0);

  Tensor y = Tensor::row({1, 2});
  y.requires_grad = true;
  Graph h;
  Var l = h.sum(h.mul(h.leaf(y), h.leaf(y)));
  h.backward(l);
  CHECK((*y.grad)[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK((*y.grad)[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("frozen leaves keep grad absent") {
  Tensor frozen = Tensor::row({1, 2});
  frozen.requires_grad = false;
  Tensor live = Tensor::row({3, 4});
  live.requires_grad = true;
  Graph g;
  g.backward(g.sum(g.mul(g.leaf(frozen), g.leaf(live))));
  CHECK(!frozen.grad.has_value());
  REQUIRE(live.grad.has_value());
  CHECK((*live.grad)[0] == 1.0);
  CHECK((*live.grad)[1] == 2.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph g;
  Var m = g.constant(Tensor::matrix({{1, 2}}));
  CHECK_THROWS_AS(g.backward(m), Error);
}

TEST_CASE("finite differences: linear, quadratic, and oracle agreement") {
  const Tensor x = Tensor::row({0.3, -0.7, 1.1});
  const Tensor ones_grad = finite_diff_grad(
      [](const Tensor& t) {
        double s = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) s += t[i];
        return s;
      },
      x, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ones_grad[i] == doctest::Approx(1.0).epsilon(1e-9));

  const Tensor x3 = Tensor::scalar(3.0);
  const Tensor quad = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, x3, 1e-5);
  CHECK(std::fabs(quad[0] - 6.0) < 1e-8);

  Rng rng(23);
  Tensor m = Tensor::randn({4, 4}, rng);
  m.requires_grad = true;
  const Tensor w = Tensor::randn({4, 4}, rng);
  Graph g;
  g.backward(g.sum(g.mul(g.gelu(g.matmul(g.leaf(m), g.constant(w))), g.constant(w))));
  const Tensor numeric = finite_diff_grad(
      [&](const Tensor& probe) {
        Graph h;
        return h
            .value(h.sum(h.mul(h.gelu(h.matmul(h.constant(probe), h.constant(w))), h.constant(w))))
            .item();
      },
      m, 1e-5);
  CHECK(max_rel_err(*m.grad, numeric.data()) < 1e-6);
  CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0), Error);
}

TEST_CASE("graph reset clears the tape but keeps leaf gradients") {
  Tensor x = Tensor::row({1, 2});
  x.requires_grad = true;
  Graph g;
  g.backward(g.sum(g.leaf(x)));
  CHECK(g.node_count() > 0);
  g.reset();
  CHECK(g.node_count() == 0);
  CHECK(x.grad.has_value());
}

TEST_CASE("cross entropy values") {
  Graph g;
  // Uniform logits over 4 classes -> ln 4.
  Var logits = g.constant(Tensor::matrix({{0, 0, 0, 0}}));
  CHECK(g.value(g.cross_entropy(logits, {2})).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Var confident = g.constant(Tensor::matrix({{50, 0, 0, 0}}));
  CHECK(g.value(g.cross_entropy(confident, {0})).item() < 1e-12);

  Var two = g.constant(Tensor::matrix({{0, 0}, {0, 0}}));
  CHECK_THROWS_AS(g.cross_entropy(two, {-1, -1}, -1), Error);
}
