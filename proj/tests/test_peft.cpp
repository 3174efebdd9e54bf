#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "peftlab/peft.hpp"

using namespace peftlab;

namespace {

PeftUnit lora_unit(std::size_t d, std::size_t r, RoutingKind routing, Rng& rng,
                   bool share_down = true, ChainKind chain = ChainKind::Standard) {
  PeftUnitSpec spec;
  spec.kind = PeftKind::Lora;
  spec.rank = r;
  spec.routing = routing;
  spec.share_down = share_down;
  spec.chain = chain;
  return make_peft_unit(spec, d, d, "u", rng);
}

PeftUnit adapter_unit(std::size_t d, std::size_t r, RoutingKind routing, Rng& rng) {
  PeftUnitSpec spec;
  spec.kind = PeftKind::Adapter;
  spec.rank = r;
  spec.routing = routing;
  return make_peft_unit(spec, d, d, "u", rng);
}

}  // namespace

TEST_CASE("construction guards") {
  Rng rng(1);
  PeftUnitSpec spec;
  spec.rank = 8;
  CHECK_THROWS_AS(make_peft_unit(spec, 8, 8, "u", rng), ConfigError);  // rank not below width
  spec.rank = 6;
  spec.chain = ChainKind::Quarter;
  CHECK_THROWS_AS(make_peft_unit(spec, 32, 32, "u", rng), ConfigError);  // 6 % 4 != 0
  spec.chain = ChainKind::Standard;
  spec.kind = PeftKind::Adapter;
  CHECK_THROWS_AS(make_peft_unit(spec, 16, 32, "u", rng), ConfigError);  // non-square adapter
}

TEST_CASE("fresh lora is invisible behind its base map") {
  Rng rng(3);
  LinearMap base = LinearMap::make(8, 8, rng, true);
  PeftUnit u = lora_unit(8, 2, RoutingKind::ProjMul, rng);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor feat = Tensor::randn({1, 8}, rng);
  Graph g;
  Var xv = g.constant(x);
  const Tensor& with = g.value(lora_forward(g, u, base, xv, g.constant(feat)));
  const Tensor& without = g.value(linear_forward(g, base, xv));
  CHECK(max_abs_diff(with, without) == 0.0);
}

TEST_CASE("routing none reduces to plain lora") {
  Rng rng(5);
  LinearMap base = LinearMap::make(8, 8, rng, true);
  PeftUnit u = lora_unit(8, 2, RoutingKind::None, rng);
  u.w_up = Tensor::randn({8, 2}, rng, 0.5);
  u.w_up.requires_grad = true;
  Tensor x = Tensor::randn({3, 8}, rng);
  Graph g;
  Var xv = g.constant(x);
  const Tensor& out = g.value(lora_forward(g, u, base, xv, std::nullopt));
  // base(x) + (alpha/r) x w_down^T w_up^T, alpha = r makes the scale exactly 1.
  Var manual = g.add(linear_forward(g, base, xv),
                     g.matmul(g.matmul(xv, g.transpose(g.constant(u.w_down))),
                              g.transpose(g.constant(u.w_up))));
  CHECK(u.spec.resolved_alpha() == 2.0);
  CHECK(max_abs_diff(out, g.value(manual)) < 1e-15);
}

TEST_CASE("alpha rescales the delta") {
  Rng rng(7);
  LinearMap base = LinearMap::identity(8);
  PeftUnit u = lora_unit(8, 2, RoutingKind::None, rng);
  u.w_up = Tensor::randn({8, 2}, rng, 0.5);
  PeftUnit doubled = u;
  doubled.spec.alpha = 4.0;  // alpha/r = 2
  Tensor x = Tensor::randn({2, 8}, rng);
  Graph g;
  Var xv = g.constant(x);
  const Tensor& base_out = g.value(linear_forward(g, base, xv));
  const Tensor& one = g.value(lora_forward(g, u, base, xv, std::nullopt));
  const Tensor& two = g.value(lora_forward(g, doubled, base, xv, std::nullopt));
  for (std::size_t i = 0; i < one.numel(); ++i) {
    CHECK(two[i] - base_out[i] == doctest::Approx(2.0 * (one[i] - base_out[i])).epsilon(1e-12));
  }
}

TEST_CASE("missing guidance feature with routing on is a configuration error") {
  Rng rng(9);
  LinearMap base = LinearMap::make(8, 8, rng, true);
  PeftUnit u = lora_unit(8, 2, RoutingKind::EltwiseMul, rng);
  Graph g;
  CHECK_THROWS_AS(lora_forward(g, u, base, g.constant(Tensor::randn({2, 8}, rng)), std::nullopt),
                  ConfigError);
}

TEST_CASE("fresh adapter is an identity") {
  Rng rng(11);
  PeftUnit u = adapter_unit(8, 2, RoutingKind::None, rng);
  Tensor x = Tensor::randn({3, 8}, rng);
  Graph g;
  CHECK(max_abs_diff(g.value(adapter_forward(g, u, g.constant(x), std::nullopt)), x) == 0.0);
}

TEST_CASE("additive routing with a zero feature equals the plain adapter") {
  Rng rng(13);
  PeftUnit routed = adapter_unit(8, 2, RoutingKind::EltwiseAdd, rng);
  routed.w_up = Tensor::randn({8, 2}, rng, 0.5);
  PeftUnit plain = routed;
  plain.spec.routing = RoutingKind::None;
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor zero_feat = Tensor::zeros({1, 8});
  Graph g;
  const Tensor& a = g.value(adapter_forward(g, routed, g.constant(x), g.constant(zero_feat)));
  const Tensor& b = g.value(adapter_forward(g, plain, g.constant(x), std::nullopt));
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("routing runs before the adapter nonlinearity, not after it") {
  Rng rng(17);
  PeftUnit u = adapter_unit(4, 2, RoutingKind::EltwiseMul, rng);
  u.w_up = Tensor::randn({4, 2}, rng, 0.5);
  // Crafted so the bottleneck goes negative: relu(route(h)) != route(relu(h)).
  u.w_down = Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}});
  u.w_down.requires_grad = true;
  Tensor x = Tensor::matrix({{-2, 3, 0, 0}});
  Tensor feat = Tensor::matrix({{-1, -1, 0, 0}});
  Graph g;
  const Tensor& actual = g.value(adapter_forward(g, u, g.constant(x), g.constant(feat)));

  // Same unit with the operations swapped by hand.
  Var xv = g.constant(x);
  Var h = g.matmul(xv, g.transpose(g.constant(u.w_down)));
  h = g.add(h, g.broadcast_rows(g.constant(*u.b_down), 1));
  Var guide = g.matmul(g.constant(feat), g.transpose(g.constant(u.w_down)));
  Var swapped = route_eltwise_mul(g, g.relu(h), guide);
  Var delta = g.add(g.matmul(swapped, g.transpose(g.constant(u.w_up))),
                    g.broadcast_rows(g.constant(*u.b_up), 1));
  const Tensor& other = g.value(g.add(xv, delta));
  CHECK(max_abs_diff(actual, other) > 1e-3);
}

TEST_CASE("single-key cross attention collapses to the value path") {
  Rng rng(19);
  PeftUnitSpec spec;
  spec.kind = PeftKind::Lora;
  spec.rank = 2;
  spec.routing = RoutingKind::CrossAttn;
  spec.pool_guide = false;
  PeftUnit u = make_peft_unit(spec, 8, 8, "u", rng);
  u.w_up = Tensor::randn({8, 2}, rng, 0.5);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor feat = Tensor::randn({1, 8}, rng);
  Graph g;
  const Tensor& delta = g.value(cross_attn_delta(g, u, g.constant(x), g.constant(feat)));
  // Softmax over one key is 1, so the delta is v * w_up^T replicated per row.
  Var v = g.matmul(g.constant(feat), g.transpose(g.constant(*u.w_value)));
  const Tensor& direct = g.value(g.matmul(v, g.transpose(g.constant(u.w_up))));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(delta.at(i, j) == doctest::Approx(direct.at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("identical feature rows make cross attention independent of row count") {
  Rng rng(23);
  PeftUnitSpec spec;
  spec.kind = PeftKind::Lora;
  spec.rank = 2;
  spec.routing = RoutingKind::CrossAttn;
  spec.pool_guide = false;
  PeftUnit u = make_peft_unit(spec, 8, 8, "u", rng);
  u.w_up = Tensor::randn({8, 2}, rng, 0.5);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor row = Tensor::randn({1, 8}, rng);
  Tensor grid({4, 8});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 8; ++j) grid.at(i, j) = row[j];
  }
  Graph g;
  const Tensor& one = g.value(cross_attn_delta(g, u, g.constant(x), g.constant(row)));
  const Tensor& many = g.value(cross_attn_delta(g, u, g.constant(x), g.constant(grid)));
  CHECK(max_abs_diff(one, many) < 1e-12);
}

TEST_CASE("parameter counts") {
  Rng rng(29);
  // d=8, r=2 lora: down 2x8 + up 8x2 = 32.
  CHECK(lora_unit(8, 2, RoutingKind::None, rng).param_count() == 32);
  CHECK(lora_routed_param_count(8, 2, true, ChainKind::Standard) == 32);

  // Routing adds nothing, for either unit kind.
  for (RoutingKind k : {RoutingKind::None, RoutingKind::EltwiseMul, RoutingKind::EltwiseAdd,
                        RoutingKind::ProjMul, RoutingKind::RescaleMul, RoutingKind::ReluProjMul}) {
    CHECK(lora_unit(8, 2, k, rng).param_count() == 32);
    CHECK(adapter_unit(8, 2, k, rng).param_count() == 32 + 2 + 8);
  }

  // A separate guidance map adds exactly r*d.
  CHECK(lora_unit(8, 2, RoutingKind::ProjMul, rng, /*share_down=*/false).param_count() == 32 + 16);

  // Cross attention at least doubles the bias-free routed adapter.
  const std::size_t cross = cross_attn_param_count(8, 2, ChainKind::Standard);
  CHECK(cross >= 2 * adapter_routed_param_count(8, 2, false));
}

TEST_CASE("quarter chain dimensions and counts") {
  Rng rng(31);
  PeftUnit u = lora_unit(32, 8, RoutingKind::ProjMul, rng, /*share_down=*/false, ChainKind::Quarter);
  CHECK(u.bottleneck_in() == 2);
  CHECK(u.w_down.shape() == std::vector<std::size_t>{2, 32});
  CHECK(u.w_mid->shape() == std::vector<std::size_t>{8, 2});
  CHECK(u.param_count() == lora_routed_param_count(32, 8, false, ChainKind::Quarter));

  Tensor x = Tensor::randn({3, 32}, rng);
  Tensor feat = Tensor::randn({2, 32}, rng);
  LinearMap base = LinearMap::make(32, 32, rng, true);
  u.spec.pool_guide = false;
  u.w_up = Tensor::randn({32, 8}, rng, 0.3);
  Graph g;
  const Tensor& out = g.value(lora_forward(g, u, base, g.constant(x), g.constant(feat)));
  CHECK(out.shape() == std::vector<std::size_t>{3, 32});
}
