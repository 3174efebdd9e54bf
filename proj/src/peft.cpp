#include "peftlab/peft.hpp"

#include <cmath>

namespace peftlab {

PeftKind parse_peft_kind(const std::string& name) {
  if (name == "lora") return PeftKind::Lora;
  if (name == "adapter") return PeftKind::Adapter;
  throw ConfigError("unknown peft kind \"" + name + "\"; valid: lora, adapter");
}

std::string peft_kind_name(PeftKind kind) {
  return kind == PeftKind::Lora ? "lora" : "adapter";
}

Nonlinearity parse_nonlinearity(const std::string& name) {
  if (name == "relu") return Nonlinearity::Relu;
  if (name == "gelu") return Nonlinearity::Gelu;
  throw ConfigError("unknown nonlinearity \"" + name + "\"; valid: relu, gelu");
}

std::string nonlinearity_name(Nonlinearity n) { return n == Nonlinearity::Relu ? "relu" : "gelu"; }

ChainKind parse_chain_kind(const std::string& name) {
  if (name == "standard") return ChainKind::Standard;
  if (name == "quarter") return ChainKind::Quarter;
  throw ConfigError("unknown chain kind \"" + name + "\"; valid: standard, quarter");
}

std::string chain_kind_name(ChainKind c) { return c == ChainKind::Standard ? "standard" : "quarter"; }

std::vector<std::pair<std::string, Tensor*>> PeftUnit::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto push = [&](const std::string& n, Tensor& t) { out.emplace_back(id + "." + n, &t); };
  if (spec.routing == RoutingKind::CrossAttn) {
    push("w_query", *w_query);
    push("w_key", *w_key);
    push("w_value", *w_value);
  } else {
    push("w_down", w_down);
    if (w_down_guide) push("w_down_guide", *w_down_guide);
  }
  if (w_mid) push("w_mid", *w_mid);
  push("w_up", w_up);
  if (b_down) push("b_down", *b_down);
  if (b_up) push("b_up", *b_up);
  return out;
}

std::size_t PeftUnit::param_count() const {
  std::size_t n = 0;
  auto add = [&](const std::optional<Tensor>& t) {
    if (t) n += t->numel();
  };
  if (spec.routing == RoutingKind::CrossAttn) {
    add(w_query);
    add(w_key);
    add(w_value);
  } else {
    n += w_down.numel();
    add(w_down_guide);
  }
  add(w_mid);
  n += w_up.numel();
  add(b_down);
  add(b_up);
  return n;
}

PeftUnit make_peft_unit(const PeftUnitSpec& spec, std::size_t in_dim, std::size_t out_dim,
                        const std::string& id, Rng& rng) {
  if (spec.rank == 0) throw ConfigError("peft rank must be positive");
  if (spec.rank >= in_dim || spec.rank >= out_dim) {
    throw ConfigError("peft rank " + std::to_string(spec.rank) + " must be below the mapped widths " +
                      std::to_string(in_dim) + "/" + std::to_string(out_dim));
  }
  if (spec.chain == ChainKind::Quarter && spec.rank % 4 != 0) {
    throw ConfigError("quarter chain requires rank divisible by 4, got " + std::to_string(spec.rank));
  }
  if (spec.kind == PeftKind::Adapter && in_dim != out_dim) {
    throw ConfigError("adapter units require matching in/out widths");
  }
  if (spec.kind == PeftKind::Adapter && spec.chain == ChainKind::Quarter) {
    throw ConfigError("quarter chain is only defined for lora units");
  }

  PeftUnit u;
  u.spec = spec;
  u.id = id;
  u.in_dim = in_dim;
  u.out_dim = out_dim;
  const std::size_t b = u.bottleneck_in();
  const std::size_t r = spec.rank;

  const bool lora = spec.kind == PeftKind::Lora;
  const double down_std = lora ? 1.0 / std::sqrt(static_cast<double>(in_dim)) : 0.01;

  auto trainable = [](Tensor t) {
    t.requires_grad = true;
    return t;
  };

  if (spec.routing == RoutingKind::CrossAttn) {
    u.w_query = trainable(Tensor::randn({b, in_dim}, rng, down_std));
    u.w_key = trainable(Tensor::randn({b, in_dim}, rng, down_std));
    u.w_value = trainable(Tensor::randn({b, in_dim}, rng, down_std));
  } else {
    u.w_down = trainable(Tensor::randn({b, in_dim}, rng, down_std));
    if (!spec.share_down) u.w_down_guide = trainable(Tensor::randn({b, in_dim}, rng, down_std));
  }
  if (spec.chain == ChainKind::Quarter) {
    u.w_mid = trainable(Tensor::randn({r, b}, rng, 1.0 / std::sqrt(static_cast<double>(b))));
  }
  // Zero-initialized up-projection keeps a freshly injected model identical
  // to the frozen backbone.
  u.w_up = trainable(Tensor::zeros({out_dim, r}));
  // The cross-attention comparator is the bare query/key/value/up chain.
  if (spec.kind == PeftKind::Adapter && spec.routing != RoutingKind::CrossAttn) {
    u.b_down = trainable(Tensor::zeros({1, r}));
    u.b_up = trainable(Tensor::zeros({1, out_dim}));
  }
  return u;
}

Var unit_guide(Graph& g, PeftUnit& u, Var guide_raw) {
  Tensor& down = u.w_down_guide ? *u.w_down_guide : u.w_down;
  const Tensor& raw = g.value(guide_raw);
  if (!raw.is_matrix() || raw.cols() != down.cols()) {
    throw DimError("guidance feature width mismatch: " + shape_str(raw.shape()) + " vs map " +
                   shape_str(down.shape()));
  }
  Var v = g.matmul(guide_raw, g.transpose(g.leaf(down)));
  if (u.spec.pool_guide) v = prepare_guide(g, v);
  return v;
}

namespace {

Var require_guide(Graph& g, PeftUnit& u, const std::optional<Var>& guide_raw) {
  if (!guide_raw) {
    throw ConfigError("unit " + u.id + " routes with " + routing_kind_name(u.spec.routing) +
                      " but no guidance feature was supplied");
  }
  return unit_guide(g, u, *guide_raw);
}

Var up_chain(Graph& g, PeftUnit& u, Var bottleneck) {
  Var h = bottleneck;
  if (u.w_mid) h = g.matmul(h, g.transpose(g.leaf(*u.w_mid)));
  return g.matmul(h, g.transpose(g.leaf(u.w_up)));
}

}  // namespace

Var lora_delta(Graph& g, PeftUnit& u, Var x, std::optional<Var> guide_raw) {
  if (u.spec.kind != PeftKind::Lora) throw ConfigError("lora_delta on a non-lora unit " + u.id);
  if (u.spec.routing == RoutingKind::CrossAttn) {
    if (!guide_raw) throw ConfigError("unit " + u.id + " uses cross_attn but no feature was supplied");
    Var delta = cross_attn_delta(g, u, x, *guide_raw);
    return g.scale(delta, u.spec.resolved_alpha() / static_cast<double>(u.spec.rank));
  }
  Var tokens = g.matmul(x, g.transpose(g.leaf(u.w_down)));
  Var routed = tokens;
  if (u.spec.routing != RoutingKind::None) {
    routed = apply_routing(g, u.spec.routing, tokens, require_guide(g, u, guide_raw));
  }
  return g.scale(up_chain(g, u, routed), u.spec.resolved_alpha() / static_cast<double>(u.spec.rank));
}

Var lora_forward(Graph& g, PeftUnit& u, LinearMap& base, Var x, std::optional<Var> guide_raw) {
  return g.add(linear_forward(g, base, x), lora_delta(g, u, x, guide_raw));
}

Var adapter_forward(Graph& g, PeftUnit& u, Var x, std::optional<Var> guide_raw) {
  if (u.spec.kind != PeftKind::Adapter) throw ConfigError("adapter_forward on a non-adapter unit " + u.id);
  if (u.spec.routing == RoutingKind::CrossAttn) {
    // Parallel comparator: the attention output joins the residual stream.
    if (!guide_raw) throw ConfigError("unit " + u.id + " uses cross_attn but no feature was supplied");
    return g.add(x, cross_attn_delta(g, u, x, *guide_raw));
  }
  const std::size_t rows = g.value(x).rows();
  Var h = g.matmul(x, g.transpose(g.leaf(u.w_down)));
  h = g.add(h, g.broadcast_rows(g.leaf(*u.b_down), rows));
  // Routing runs before the nonlinearity.
  if (u.spec.routing != RoutingKind::None) {
    h = apply_routing(g, u.spec.routing, h, require_guide(g, u, guide_raw));
  }
  h = u.spec.nonlinearity == Nonlinearity::Relu ? g.relu(h) : g.gelu(h);
  Var delta = g.add(up_chain(g, u, h), g.broadcast_rows(g.leaf(*u.b_up), rows));
  return g.add(x, delta);
}

Var cross_attn_delta(Graph& g, PeftUnit& u, Var x, Var guide_raw) {
  if (u.spec.routing != RoutingKind::CrossAttn) {
    throw ConfigError("cross_attn_delta on unit " + u.id + " configured with " +
                      routing_kind_name(u.spec.routing));
  }
  const std::size_t b = u.bottleneck_in();
  Var q = g.matmul(x, g.transpose(g.leaf(*u.w_query)));
  Var k = g.matmul(guide_raw, g.transpose(g.leaf(*u.w_key)));
  Var v = g.matmul(guide_raw, g.transpose(g.leaf(*u.w_value)));
  Var scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(b)));
  Var probs = g.softmax_rows(scores);
  return up_chain(g, u, g.matmul(probs, v));
}

std::size_t lora_routed_param_count(std::size_t d, std::size_t r, bool share_down, ChainKind chain) {
  const std::size_t b = chain == ChainKind::Quarter ? r / 4 : r;
  std::size_t n = b * d + d * r;  // down + up
  if (!share_down) n += b * d;
  if (chain == ChainKind::Quarter) n += r * b;
  return n;
}

std::size_t adapter_routed_param_count(std::size_t d, std::size_t r, bool with_biases) {
  return r * d + d * r + (with_biases ? r + d : 0);
}

std::size_t cross_attn_param_count(std::size_t d, std::size_t r, ChainKind chain) {
  const std::size_t b = chain == ChainKind::Quarter ? r / 4 : r;
  std::size_t n = 3 * b * d + d * r;  // query/key/value + up
  if (chain == ChainKind::Quarter) n += r * b;
  return n;
}

}  // namespace peftlab
