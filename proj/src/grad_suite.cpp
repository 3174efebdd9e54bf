#include <functional>

#include "peftlab/analysis.hpp"
#include "peftlab/grad_check.hpp"
#include "peftlab/model.hpp"

namespace peftlab {

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform01();
  return t;
}

// Uniform magnitude in [0.05, 1]; keeps relu kinks away from the
// finite-difference stencil.
Tensor off_zero_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double mag = 0.05 + 0.95 * rng.uniform01();
    t[i] = rng.uniform01() < 0.5 ? -mag : mag;
  }
  return t;
}

class Harness {
 public:
  Harness(std::uint64_t seed, double eps) : rng_(seed), eps_(eps) {}

  Rng& rng() { return rng_; }
  std::vector<GradCheckCase> take() { return std::move(cases_); }

  /// Compares the tape gradient of `param` against central differences under
  /// the scalar loss built by `make_loss` over current tensor state.
  void check(const std::string& name, Tensor& param, const std::function<Var(Graph&)>& make_loss) {
    param.requires_grad = true;
    param.clear_grad();
    Graph g;
    g.backward(make_loss(g));
    if (!param.grad) throw Error("gradient check " + name + ": no gradient reached the parameter");
    const std::vector<double> autodiff = *param.grad;
    param.clear_grad();
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& probe) {
          const std::vector<double> saved = param.data();
          param.data() = probe.data();
          Graph inner;
          const double v = inner.value(make_loss(inner)).item();
          param.data() = saved;
          return v;
        },
        param, eps_);
    cases_.push_back({name, max_rel_err(autodiff, numeric.data())});
  }

  /// Weighted sum with fixed random weights; catches transposed gradients
  /// that a plain sum would miss.
  Var weighted_sum(Graph& g, Var x, const Tensor& weights) {
    return g.sum(g.mul(x, g.constant(weights)));
  }

 private:
  Rng rng_;
  double eps_;
  std::vector<GradCheckCase> cases_;
};

void op_level_cases(Harness& h) {
  Rng& rng = h.rng();
  {
    Tensor a = uniform_tensor({3, 4}, rng);
    Tensor b = uniform_tensor({4, 2}, rng);
    const Tensor w = uniform_tensor({3, 2}, rng);
    h.check("op.matmul.lhs", a, [&](Graph& g) {
      return h.weighted_sum(g, g.matmul(g.leaf(a), g.constant(b)), w);
    });
    h.check("op.matmul.rhs", b, [&](Graph& g) {
      return h.weighted_sum(g, g.matmul(g.constant(a), g.leaf(b)), w);
    });
  }
  {
    Tensor a = uniform_tensor({2, 5}, rng);
    Tensor b = uniform_tensor({2, 5}, rng);
    const Tensor w = uniform_tensor({2, 5}, rng);
    h.check("op.add", a, [&](Graph& g) {
      return h.weighted_sum(g, g.add(g.leaf(a), g.constant(b)), w);
    });
    h.check("op.mul", a, [&](Graph& g) {
      return h.weighted_sum(g, g.mul(g.leaf(a), g.constant(b)), w);
    });
    h.check("op.scale", a, [&](Graph& g) { return h.weighted_sum(g, g.scale(g.leaf(a), -1.7), w); });
  }
  {
    Tensor a = uniform_tensor({3, 4}, rng);
    const Tensor w = uniform_tensor({4, 3}, rng);
    h.check("op.transpose", a, [&](Graph& g) {
      return h.weighted_sum(g, g.transpose(g.leaf(a)), w);
    });
  }
  {
    Tensor v = uniform_tensor({1, 4}, rng);
    const Tensor w = uniform_tensor({5, 4}, rng);
    h.check("op.broadcast_rows", v, [&](Graph& g) {
      return h.weighted_sum(g, g.broadcast_rows(g.leaf(v), 5), w);
    });
  }
  {
    Tensor x = off_zero_tensor({3, 4}, rng);
    const Tensor w = uniform_tensor({3, 4}, rng);
    h.check("op.relu", x, [&](Graph& g) { return h.weighted_sum(g, g.relu(g.leaf(x)), w); });
    h.check("op.gelu", x, [&](Graph& g) { return h.weighted_sum(g, g.gelu(g.leaf(x)), w); });
  }
  {
    Tensor x = uniform_tensor({3, 5}, rng);
    const Tensor w = uniform_tensor({3, 5}, rng);
    h.check("op.softmax_rows", x, [&](Graph& g) {
      return h.weighted_sum(g, g.softmax_rows(g.leaf(x)), w);
    });
  }
  {
    Tensor x = uniform_tensor({4, 4}, rng);
    const Tensor w = uniform_tensor({4, 4}, rng);
    h.check("op.causal_softmax_rows", x, [&](Graph& g) {
      return h.weighted_sum(g, g.causal_softmax_rows(g.leaf(x)), w);
    });
  }
  {
    Tensor x = uniform_tensor({4, 3}, rng);
    const Tensor w = uniform_tensor({1, 3}, rng);
    h.check("op.mean_rows", x, [&](Graph& g) {
      return h.weighted_sum(g, g.mean_rows(g.leaf(x)), w);
    });
    h.check("op.sum", x, [&](Graph& g) { return g.sum(g.leaf(x)); });
    h.check("op.frobenius_norm", x, [&](Graph& g) { return g.frobenius_norm(g.leaf(x)); });
  }
  {
    Tensor table = uniform_tensor({6, 3}, rng);
    const Tensor w = uniform_tensor({4, 3}, rng);
    h.check("op.gather_rows", table, [&](Graph& g) {
      return h.weighted_sum(g, g.gather_rows(g.leaf(table), {1, 4, 1, 0}), w);
    });
  }
  {
    Tensor x = uniform_tensor({5, 4}, rng);
    const Tensor w = uniform_tensor({2, 4}, rng);
    h.check("op.take_rows", x, [&](Graph& g) {
      return h.weighted_sum(g, g.take_rows(g.leaf(x), 1, 2), w);
    });
  }
  {
    Tensor a = uniform_tensor({2, 3}, rng);
    Tensor b = uniform_tensor({3, 3}, rng);
    const Tensor w = uniform_tensor({5, 3}, rng);
    h.check("op.concat_rows", a, [&](Graph& g) {
      return h.weighted_sum(g, g.concat_rows(g.leaf(a), g.leaf(b)), w);
    });
  }
  {
    Tensor x = uniform_tensor({3, 6}, rng);
    const Tensor w = uniform_tensor({3, 2}, rng);
    const Tensor w2 = uniform_tensor({3, 6}, rng);
    h.check("op.slice_cols", x, [&](Graph& g) {
      return h.weighted_sum(g, g.slice_cols(g.leaf(x), 2, 2), w);
    });
    h.check("op.concat_cols", x, [&](Graph& g) {
      Var lo = g.slice_cols(g.leaf(x), 0, 3);
      Var hi = g.slice_cols(g.leaf(x), 3, 3);
      return h.weighted_sum(g, g.concat_cols({lo, hi}), w2);
    });
  }
  {
    Tensor x = uniform_tensor({3, 5}, rng);
    Tensor gain = uniform_tensor({1, 5}, rng, 0.5, 1.5);
    Tensor bias = uniform_tensor({1, 5}, rng);
    const Tensor w = uniform_tensor({3, 5}, rng);
    h.check("op.layer_norm.x", x, [&](Graph& g) {
      return h.weighted_sum(g, g.layer_norm_rows(g.leaf(x), g.leaf(gain), g.leaf(bias)), w);
    });
    h.check("op.layer_norm.gain", gain, [&](Graph& g) {
      return h.weighted_sum(g, g.layer_norm_rows(g.leaf(x), g.leaf(gain), g.leaf(bias)), w);
    });
    h.check("op.layer_norm.bias", bias, [&](Graph& g) {
      return h.weighted_sum(g, g.layer_norm_rows(g.leaf(x), g.leaf(gain), g.leaf(bias)), w);
    });
  }
  {
    Tensor logits = uniform_tensor({4, 5}, rng);
    h.check("op.cross_entropy", logits, [&](Graph& g) {
      return g.cross_entropy(g.leaf(logits), {1, -1, 4, 0}, -1);
    });
  }
}

void routing_cases(Harness& h) {
  Rng& rng = h.rng();
  const std::vector<RoutingKind> kinds{RoutingKind::EltwiseMul, RoutingKind::EltwiseAdd,
                                       RoutingKind::ProjMul, RoutingKind::RescaleMul,
                                       RoutingKind::ReluProjMul};
  for (RoutingKind kind : kinds) {
    Tensor tokens = off_zero_tensor({3, 4}, rng);
    Tensor guide = off_zero_tensor({1, 4}, rng);
    const Tensor w = uniform_tensor({3, 4}, rng);
    const std::string tag = "routing." + routing_kind_name(kind);
    h.check(tag + ".tokens", tokens, [&, kind](Graph& g) {
      return h.weighted_sum(g, apply_routing(g, kind, g.leaf(tokens), g.leaf(guide)), w);
    });
    h.check(tag + ".guide", guide, [&, kind](Graph& g) {
      return h.weighted_sum(g, apply_routing(g, kind, g.leaf(tokens), g.leaf(guide)), w);
    });
  }
  {
    // Multi-row guide through the general projection product.
    Tensor tokens = off_zero_tensor({3, 4}, rng);
    Tensor guide = off_zero_tensor({2, 4}, rng);
    const Tensor w = uniform_tensor({3, 4}, rng);
    h.check("routing.proj.multirow_guide", guide, [&](Graph& g) {
      return h.weighted_sum(g, route_proj_mul(g, g.leaf(tokens), g.leaf(guide)), w);
    });
  }
}

void unit_cases(Harness& h) {
  Rng& rng = h.rng();
  const std::vector<RoutingKind> kinds{RoutingKind::None,       RoutingKind::EltwiseMul,
                                       RoutingKind::EltwiseAdd, RoutingKind::ProjMul,
                                       RoutingKind::RescaleMul, RoutingKind::ReluProjMul};
  const std::size_t d = 8, r = 2;
  for (PeftKind pk : {PeftKind::Lora, PeftKind::Adapter}) {
    for (RoutingKind kind : kinds) {
      PeftUnitSpec spec;
      spec.kind = pk;
      spec.rank = r;
      spec.routing = kind;
      Rng unit_rng = rng.fork(static_cast<std::uint64_t>(kind) * 7 + (pk == PeftKind::Lora ? 0 : 100));
      PeftUnit unit = make_peft_unit(spec, d, d, "probe", unit_rng);
      // Random up map so the gradient path through it is non-trivial.
      unit.w_up = Tensor::randn({d, r}, unit_rng, 0.3);
      unit.w_up.requires_grad = true;
      Tensor x = off_zero_tensor({3, d}, rng);
      Tensor feat = off_zero_tensor({1, d}, rng);
      const Tensor w = uniform_tensor({3, d}, rng);
      LinearMap base = LinearMap::make(d, d, rng, /*frozen=*/true);
      auto make_loss = [&](Graph& g) {
        std::optional<Var> guide;
        if (kind != RoutingKind::None) guide = g.constant(feat);
        Var out = pk == PeftKind::Lora ? lora_forward(g, unit, base, g.leaf(x), guide)
                                       : adapter_forward(g, unit, g.leaf(x), guide);
        return h.weighted_sum(g, out, w);
      };
      const std::string tag = "unit." + peft_kind_name(pk) + "." + routing_kind_name(kind);
      h.check(tag + ".w_down", unit.w_down, make_loss);
      h.check(tag + ".w_up", unit.w_up, make_loss);
      h.check(tag + ".input", x, make_loss);
      if (pk == PeftKind::Adapter) h.check(tag + ".b_down", *unit.b_down, make_loss);
    }
  }
  // Separate guidance map.
  {
    PeftUnitSpec spec;
    spec.kind = PeftKind::Lora;
    spec.rank = r;
    spec.routing = RoutingKind::ProjMul;
    spec.share_down = false;
    Rng unit_rng = rng.fork(555);
    PeftUnit unit = make_peft_unit(spec, d, d, "probe", unit_rng);
    unit.w_up = Tensor::randn({d, r}, unit_rng, 0.3);
    unit.w_up.requires_grad = true;
    Tensor x = off_zero_tensor({3, d}, rng);
    Tensor feat = off_zero_tensor({1, d}, rng);
    const Tensor w = uniform_tensor({3, d}, rng);
    LinearMap base = LinearMap::make(d, d, rng, true);
    auto make_loss = [&](Graph& g) {
      return h.weighted_sum(g, lora_forward(g, unit, base, g.leaf(x), g.constant(feat)), w);
    };
    h.check("unit.lora.proj.separate.w_down_guide", *unit.w_down_guide, make_loss);
  }
  // Cross-attention comparator, both chains.
  for (ChainKind chain : {ChainKind::Standard, ChainKind::Quarter}) {
    PeftUnitSpec spec;
    spec.kind = PeftKind::Lora;
    spec.rank = chain == ChainKind::Quarter ? 4 : r;
    spec.routing = RoutingKind::CrossAttn;
    spec.chain = chain;
    spec.pool_guide = false;
    Rng unit_rng = rng.fork(chain == ChainKind::Quarter ? 901 : 900);
    PeftUnit unit = make_peft_unit(spec, d, d, "probe", unit_rng);
    unit.w_up = Tensor::randn({d, spec.rank}, unit_rng, 0.3);
    unit.w_up.requires_grad = true;
    Tensor x = off_zero_tensor({3, d}, rng);
    Tensor feat = off_zero_tensor({4, d}, rng);  // multi-row feature grid
    const Tensor w = uniform_tensor({3, d}, rng);
    LinearMap base = LinearMap::make(d, d, rng, true);
    auto make_loss = [&](Graph& g) {
      return h.weighted_sum(g, lora_forward(g, unit, base, g.leaf(x), g.constant(feat)), w);
    };
    const std::string tag = "unit.lora.cross_attn." + chain_kind_name(chain);
    h.check(tag + ".w_query", *unit.w_query, make_loss);
    h.check(tag + ".w_key", *unit.w_key, make_loss);
    h.check(tag + ".w_value", *unit.w_value, make_loss);
    h.check(tag + ".w_up", unit.w_up, make_loss);
    if (unit.w_mid) h.check(tag + ".w_mid", *unit.w_mid, make_loss);
  }
}

ModelConfig tiny_model_config(ModelKind kind) {
  ModelConfig mc;
  mc.kind = kind;
  mc.d = 8;
  mc.heads = 2;
  mc.enc_blocks = 2;
  mc.dec_blocks = 2;
  mc.ffn_mult = 2;
  mc.vocab = 12;
  mc.classes = 3;
  mc.visual_dim = 8;
  mc.max_len = 8;
  mc.seed = 11;
  return mc;
}

void model_cases(Harness& h) {
  Rng& rng = h.rng();
  const AttributeWorld world = AttributeWorld::make(2, 3, 8, 0.05, 21);
  const Dataset qa = gen_qa(world, 6, 31);
  const Dataset cap = gen_caption(world, 6, 32);
  const Dataset multi = gen_multitask(world, 6, 33);

  const std::vector<RoutingKind> kinds{RoutingKind::None,       RoutingKind::EltwiseMul,
                                       RoutingKind::EltwiseAdd, RoutingKind::ProjMul,
                                       RoutingKind::RescaleMul, RoutingKind::ReluProjMul};
  for (PeftKind pk : {PeftKind::Lora, PeftKind::Adapter}) {
    for (RoutingKind kind : kinds) {
      Model model = Model::build(tiny_model_config(ModelKind::EncoderClassifier));
      PeftPlacement placement;
      placement.spec.kind = pk;
      placement.spec.rank = 2;
      placement.spec.routing = kind;
      Rng inj = rng.fork(static_cast<std::uint64_t>(kind) * 13 + (pk == PeftKind::Lora ? 0 : 41));
      model.inject_peft(placement, inj);
      // Non-zero up maps give the bottleneck a live gradient path.
      Rng warm = rng.fork(static_cast<std::uint64_t>(kind) * 17 + 3);
      for (const UnitInstance& ui : model.units()) {
        ui.unit->w_up = Tensor::randn(ui.unit->w_up.shape(), warm, 0.2);
        ui.unit->w_up.requires_grad = true;
      }
      const Sample& s0 = qa.samples.at(0);
      const Sample& s1 = qa.samples.at(1);
      auto make_loss = [&](Graph& g) { return g.add(model.loss(g, s0), model.loss(g, s1)); };
      const std::string tag =
          "model.classifier." + peft_kind_name(pk) + "." + routing_kind_name(kind);
      PeftUnit& first = *model.units().front().unit;
      PeftUnit& last = *model.units().back().unit;
      h.check(tag + ".unit0.w_down", first.w_down, make_loss);
      h.check(tag + ".unit0.w_up", first.w_up, make_loss);
      h.check(tag + ".unitN.w_down", last.w_down, make_loss);
    }
  }
  // Classifier head through a routed model.
  {
    Model model = Model::build(tiny_model_config(ModelKind::EncoderClassifier));
    PeftPlacement placement;
    placement.spec.kind = PeftKind::Lora;
    placement.spec.rank = 2;
    placement.spec.routing = RoutingKind::ProjMul;
    Rng inj = rng.fork(7001);
    model.inject_peft(placement, inj);
    const Sample& s0 = qa.samples.at(2);
    auto make_loss = [&](Graph& g) { return model.loss(g, s0); };
    auto named = model.named_tensors();
    for (NamedTensor& nt : named) {
      if (nt.group == "head") h.check("model.classifier.head." + nt.name, *nt.tensor, make_loss);
    }
  }
  // Decoder generator, teacher-forced.
  for (RoutingKind kind : {RoutingKind::EltwiseMul, RoutingKind::RescaleMul}) {
    Model model = Model::build(tiny_model_config(ModelKind::DecoderGenerator));
    PeftPlacement placement;
    placement.spec.kind = PeftKind::Lora;
    placement.spec.rank = 2;
    placement.spec.routing = kind;
    Rng inj = rng.fork(7100 + static_cast<std::uint64_t>(kind));
    model.inject_peft(placement, inj);
    Rng warm = rng.fork(7200 + static_cast<std::uint64_t>(kind));
    for (const UnitInstance& ui : model.units()) {
      ui.unit->w_up = Tensor::randn(ui.unit->w_up.shape(), warm, 0.2);
      ui.unit->w_up.requires_grad = true;
    }
    const Sample& s0 = cap.samples.at(0);
    auto make_loss = [&](Graph& g) { return model.loss(g, s0); };
    const std::string tag = "model.generator.lora." + routing_kind_name(kind);
    PeftUnit& first = *model.units().front().unit;
    h.check(tag + ".w_down", first.w_down, make_loss);
    h.check(tag + ".w_up", first.w_up, make_loss);
  }
  // Decoder generator in comparator mode with the cross-attention unit.
  {
    ModelConfig mc = tiny_model_config(ModelKind::DecoderGenerator);
    mc.comparator_mode = true;
    Model model = Model::build(mc);
    PeftPlacement placement;
    placement.spec.kind = PeftKind::Lora;
    placement.spec.rank = 4;
    placement.spec.routing = RoutingKind::CrossAttn;
    placement.spec.chain = ChainKind::Quarter;
    Rng inj = rng.fork(7300);
    model.inject_peft(placement, inj);
    Rng warm = rng.fork(7301);
    for (const UnitInstance& ui : model.units()) {
      ui.unit->w_up = Tensor::randn(ui.unit->w_up.shape(), warm, 0.2);
      ui.unit->w_up.requires_grad = true;
    }
    Sample s0 = cap.samples.at(1);
    Tensor grid({3, 8});
    Rng grid_rng = rng.fork(7302);
    for (std::size_t i = 0; i < grid.numel(); ++i) grid[i] = grid_rng.uniform01() * 2.0 - 1.0;
    s0.visual = grid;
    auto make_loss = [&](Graph& g) { return model.loss(g, s0); };
    PeftUnit& first = *model.units().front().unit;
    h.check("model.generator.cross_attn.w_query", *first.w_query, make_loss);
    h.check("model.generator.cross_attn.w_mid", *first.w_mid, make_loss);
    h.check("model.generator.cross_attn.w_up", first.w_up, make_loss);
  }
  // Encoder-decoder multitask: gradient reaches the visual projection, the
  // encoder units, and the decoder units through the pooled guidance.
  {
    Model model = Model::build(tiny_model_config(ModelKind::EncDecMultitask));
    PeftPlacement placement;
    placement.spec.kind = PeftKind::Adapter;
    placement.spec.rank = 2;
    placement.spec.routing = RoutingKind::EltwiseAdd;
    Rng inj = rng.fork(7400);
    model.inject_peft(placement, inj);
    Rng warm = rng.fork(7401);
    for (const UnitInstance& ui : model.units()) {
      ui.unit->w_up = Tensor::randn(ui.unit->w_up.shape(), warm, 0.2);
      ui.unit->w_up.requires_grad = true;
    }
    const Sample& s0 = multi.samples.at(0);
    const Sample& s1 = multi.samples.at(1);
    auto make_loss = [&](Graph& g) { return g.add(model.loss(g, s0), model.loss(g, s1)); };
    PeftUnit* enc_unit = nullptr;
    PeftUnit* dec_unit = nullptr;
    for (const UnitInstance& ui : model.units()) {
      if (ui.section == "enc" && !enc_unit) enc_unit = ui.unit.get();
      if (ui.section == "dec" && !dec_unit) dec_unit = ui.unit.get();
    }
    h.check("model.encdec.adapter.enc.w_down", enc_unit->w_down, make_loss);
    h.check("model.encdec.adapter.dec.w_down", dec_unit->w_down, make_loss);
    h.check("model.encdec.adapter.dec.w_up", dec_unit->w_up, make_loss);
    auto named = model.named_tensors();
    for (NamedTensor& nt : named) {
      if (nt.group == "visual_proj") h.check("model.encdec." + nt.name, *nt.tensor, make_loss);
    }
  }
}

}  // namespace

std::vector<GradCheckCase> run_grad_check_suite(std::uint64_t seed, double eps) {
  Harness h(seed, eps);
  op_level_cases(h);
  routing_cases(h);
  unit_cases(h);
  model_cases(h);
  return h.take();
}

}  // namespace peftlab
