#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "peftlab/blocks.hpp"
#include "peftlab/grad_check.hpp"

using namespace peftlab;

TEST_CASE("linear_forward basics") {
  Graph g;
  LinearMap id = LinearMap::identity(3);
  Tensor x = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(max_abs_diff(g.value(linear_forward(g, id, g.constant(x))), x) == 0.0);

  LinearMap scalar;
  scalar.weight = Tensor::matrix({{2}});
  scalar.set_frozen(true);
  CHECK(g.value(linear_forward(g, scalar, g.constant(Tensor::matrix({{3}})))).item() == 6.0);

  CHECK_THROWS_AS(linear_forward(g, id, g.constant(Tensor::matrix({{1, 2}}))), DimError);
}

TEST_CASE("frozen maps stay gradient-free but pass gradients through") {
  Rng rng(3);
  LinearMap m = LinearMap::make(3, 3, rng, /*frozen=*/true);
  Tensor x = Tensor::randn({2, 3}, rng);
  x.requires_grad = true;
  Graph g;
  g.backward(g.sum(linear_forward(g, m, g.leaf(x))));
  CHECK(!m.weight.grad.has_value());
  CHECK(x.grad.has_value());

  m.set_frozen(false);
  x.clear_grad();
  Graph h;
  h.backward(h.sum(linear_forward(h, m, h.leaf(x))));
  CHECK(m.weight.grad.has_value());
}

TEST_CASE("single-token attention is the value path through the output map") {
  Rng rng(7);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, /*causal=*/false, rng);
  Tensor x = Tensor::randn({1, 8}, rng);
  Graph g;
  Var input = g.constant(x);
  const Tensor& attn = g.value(mha_forward(g, b, input, std::nullopt));
  const Tensor& direct = g.value(linear_forward(g, b.output, linear_forward(g, b.value, input)));
  CHECK(max_abs_diff(attn, direct) < 1e-12);

  AttentionTrace trace;
  Graph h;
  mha_forward(h, b, h.constant(x), std::nullopt, &trace);
  REQUIRE(trace.layers.size() == 1);
  CHECK(trace.layers[0].item() == 1.0);
}

TEST_CASE("causal attention lets token zero attend only to itself") {
  Rng rng(11);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, /*causal=*/true, rng);
  AttentionTrace trace;
  Graph g;
  mha_forward(g, b, g.constant(Tensor::randn({2, 8}, rng)), std::nullopt, &trace);
  const Tensor& p = trace.layers[0];
  CHECK(p.at(0, 0) == 1.0);
  CHECK(p.at(0, 1) == 0.0);
}

TEST_CASE("uniform rows stay uniform through non-causal attention") {
  Rng rng(13);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, false, rng);
  Tensor row = Tensor::randn({1, 8}, rng);
  Tensor x({3, 8});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) x.at(i, j) = row[j];
  }
  Graph g;
  const Tensor& out = g.value(mha_forward(g, b, g.constant(x), std::nullopt));
  for (std::size_t i = 1; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(out.at(i, j) == doctest::Approx(out.at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("future tokens cannot influence earlier causal outputs") {
  Rng rng(17);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, /*causal=*/true, rng);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor perturbed = x;
  for (std::size_t j = 0; j < 8; ++j) perturbed.at(2, j) += 10.0 * (rng.uniform01() - 0.5);
  Graph g, h;
  const Tensor& a = g.value(block_forward(g, b, g.constant(x), std::nullopt));
  const Tensor& c = h.value(block_forward(h, b, h.constant(perturbed), std::nullopt));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 8; ++j) CHECK(a.at(i, j) == c.at(i, j));
  }
}

TEST_CASE("zeroed output maps make the block an identity") {
  Rng rng(19);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, false, rng);
  b.output.weight = Tensor::zeros({8, 8});
  b.output.bias = Tensor::zeros({1, 8});
  b.ffn_out.weight = Tensor::zeros({8, 16});
  b.ffn_out.bias = Tensor::zeros({1, 8});
  Tensor x = Tensor::randn({3, 8}, rng);
  Graph g;
  CHECK(max_abs_diff(g.value(block_forward(g, b, g.constant(x), std::nullopt)), x) == 0.0);
}

TEST_CASE("a zero-up adapter leaves the block output unchanged") {
  Rng rng(23);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, false, rng);
  Tensor x = Tensor::randn({3, 8}, rng);
  Graph g;
  const Tensor plain = g.value(block_forward(g, b, g.constant(x), std::nullopt));

  PeftUnitSpec spec;
  spec.kind = PeftKind::Adapter;
  spec.rank = 2;
  PeftUnit attn_unit = make_peft_unit(spec, 8, 8, "attn", rng);
  PeftUnit ffn_unit = make_peft_unit(spec, 8, 8, "ffn", rng);
  b.adapter_attn = &attn_unit;
  b.adapter_ffn = &ffn_unit;
  Graph h;
  CHECK(max_abs_diff(h.value(block_forward(h, b, h.constant(x), std::nullopt)), plain) == 0.0);
}

TEST_CASE("blocks rebuilt from one seed match bit for bit") {
  Rng rng_a(29), rng_b(29);
  TransformerBlock a = TransformerBlock::make(8, 2, 2, false, rng_a);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, false, rng_b);
  Rng xr(31);
  Tensor x = Tensor::randn({3, 8}, xr);
  Graph g, h;
  const Tensor& ya = g.value(block_forward(g, a, g.constant(x), std::nullopt));
  const Tensor& yb = h.value(block_forward(h, b, h.constant(x), std::nullopt));
  CHECK(max_abs_diff(ya, yb) == 0.0);
}

TEST_CASE("full block gradient check at d=8, h=2, L=3") {
  Rng rng(37);
  TransformerBlock b = TransformerBlock::make(8, 2, 2, false, rng);
  Tensor x = Tensor::randn({3, 8}, rng, 0.5);
  x.requires_grad = true;
  const Tensor w = Tensor::randn({3, 8}, rng);
  auto make_loss = [&](Graph& g, Var input) {
    return g.sum(g.mul(block_forward(g, b, input, std::nullopt), g.constant(w)));
  };
  Graph g;
  g.backward(make_loss(g, g.leaf(x)));
  REQUIRE(x.grad.has_value());
  const Tensor numeric = finite_diff_grad(
      [&](const Tensor& probe) {
        Graph h;
        return h.value(make_loss(h, h.constant(probe))).item();
      },
      x, 1e-5);
  CHECK(max_rel_err(*x.grad, numeric.data()) < 1e-6);
}

TEST_CASE("embedding gather") {
  Rng rng(41);
  Tensor table = Tensor::randn({5, 4}, rng);
  Graph g;
  const Tensor& first = g.value(embed_tokens(g, table, {0}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(first.at(0, j) == table.at(0, j));

  const Tensor& rep = g.value(embed_tokens(g, table, {2, 2}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(rep.at(0, j) == rep.at(1, j));

  CHECK_THROWS_AS(embed_tokens(g, table, {5}), Error);

  table.requires_grad = true;
  Graph h;
  h.backward(h.sum(embed_tokens(h, table, {1, 1, 3})));
  REQUIRE(table.grad.has_value());
  CHECK((*table.grad)[1 * 4 + 0] == 2.0);  // row 1 gathered twice
  CHECK((*table.grad)[3 * 4 + 0] == 1.0);
  CHECK((*table.grad)[0] == 0.0);
}
