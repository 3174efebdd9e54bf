#include "peftlab/routing.hpp"

namespace peftlab {

RoutingKind parse_routing_kind(const std::string& name) {
  if (name == "none") return RoutingKind::None;
  if (name == "mul") return RoutingKind::EltwiseMul;
  if (name == "add") return RoutingKind::EltwiseAdd;
  if (name == "proj") return RoutingKind::ProjMul;
  if (name == "rescale") return RoutingKind::RescaleMul;
  if (name == "relu_proj") return RoutingKind::ReluProjMul;
  if (name == "cross_attn") return RoutingKind::CrossAttn;
  throw ConfigError("unknown routing kind \"" + name +
                    "\"; valid: none, mul, add, proj, rescale, relu_proj, cross_attn");
}

std::string routing_kind_name(RoutingKind kind) {
  switch (kind) {
    case RoutingKind::None: return "none";
    case RoutingKind::EltwiseMul: return "mul";
    case RoutingKind::EltwiseAdd: return "add";
    case RoutingKind::ProjMul: return "proj";
    case RoutingKind::RescaleMul: return "rescale";
    case RoutingKind::ReluProjMul: return "relu_proj";
    case RoutingKind::CrossAttn: return "cross_attn";
  }
  throw Error("unreachable routing kind");
}

Var prepare_guide(Graph& g, Var features) {
  const Tensor& f = g.value(features);
  if (!f.is_matrix()) throw DimError("prepare_guide requires a matrix, got " + shape_str(f.shape()));
  if (f.rows() == 1) return features;
  return g.mean_rows(features);
}

namespace {

void check_pair(Graph& g, Var tokens, Var guide, bool single_row_guide) {
  const Tensor& t = g.value(tokens);
  const Tensor& v = g.value(guide);
  if (!t.is_matrix() || !v.is_matrix()) {
    throw DimError("routing requires matrices, got " + shape_str(t.shape()) + " and " + shape_str(v.shape()));
  }
  if (t.cols() != v.cols()) {
    throw DimError("routing rank mismatch: " + shape_str(t.shape()) + " vs " + shape_str(v.shape()));
  }
  if (single_row_guide && v.rows() != 1) {
    throw DimError("routing guide must have one row (pool first), got " + shape_str(v.shape()));
  }
}

}  // namespace

Var route_eltwise_mul(Graph& g, Var tokens, Var guide) {
  check_pair(g, tokens, guide, true);
  return g.mul(tokens, g.broadcast_rows(guide, g.value(tokens).rows()));
}

Var route_eltwise_add(Graph& g, Var tokens, Var guide) {
  check_pair(g, tokens, guide, true);
  return g.add(tokens, g.broadcast_rows(guide, g.value(tokens).rows()));
}

Var route_proj_mul(Graph& g, Var tokens, Var guide) {
  check_pair(g, tokens, guide, false);
  return g.matmul(g.matmul(tokens, g.transpose(guide)), guide);
}

Var route_rescale_mul(Graph& g, Var tokens, Var guide) {
  check_pair(g, tokens, guide, true);
  const std::size_t rank = g.value(tokens).cols();
  return g.matmul(tokens, g.broadcast_rows(guide, rank));
}

Var route_relu_proj(Graph& g, Var tokens, Var guide) {
  check_pair(g, tokens, guide, false);
  return g.matmul(g.matmul(g.relu(tokens), g.transpose(g.relu(guide))), guide);
}

Var apply_routing(Graph& g, RoutingKind kind, Var tokens, Var guide) {
  switch (kind) {
    case RoutingKind::None: return tokens;
    case RoutingKind::EltwiseMul: return route_eltwise_mul(g, tokens, guide);
    case RoutingKind::EltwiseAdd: return route_eltwise_add(g, tokens, guide);
    case RoutingKind::ProjMul: return route_proj_mul(g, tokens, guide);
    case RoutingKind::RescaleMul: return route_rescale_mul(g, tokens, guide);
    case RoutingKind::ReluProjMul: return route_relu_proj(g, tokens, guide);
    case RoutingKind::CrossAttn:
      throw ConfigError("cross_attn is not a bottleneck routing op; configure it on the PEFT unit");
  }
  throw Error("unreachable routing kind");
}

}  // namespace peftlab
