#pragma once

#include <string>

#include "peftlab/graph.hpp"

namespace peftlab {

/// Parameter-free linear operations that combine the down-projected hidden
/// tokens with a down-projected guidance feature inside a low-rank
/// bottleneck. CrossAttn is the parameterized comparator and is handled by
/// the PEFT unit, not by apply_routing.
enum class RoutingKind {
  None,
  EltwiseMul,
  EltwiseAdd,
  ProjMul,
  RescaleMul,
  ReluProjMul,
  CrossAttn,
};

/// Config strings: "none", "mul", "add", "proj", "rescale", "relu_proj",
/// "cross_attn".
RoutingKind parse_routing_kind(const std::string& name);
std::string routing_kind_name(RoutingKind kind);

/// Mean-pools a multi-row feature down to a single row; identity for a
/// single-row input.
Var prepare_guide(Graph& g, Var features);

// tokens: L_t x r, guide: 1 x r unless noted otherwise.

/// tokens ∘ guide broadcast over rows: per-element reinforcement.
Var route_eltwise_mul(Graph& g, Var tokens, Var guide);

/// tokens + guide broadcast over rows: moves every token toward the guide.
Var route_eltwise_add(Graph& g, Var tokens, Var guide);

/// tokens * guideᵀ * guide: keeps the token component aligned with the
/// guide. Accepts a multi-row guide; each output row then lives in the
/// guide's row space.
Var route_proj_mul(Graph& g, Var tokens, Var guide);

/// tokens * G where G stacks the guide row r times: output row i is the
/// guide rescaled by the sum of token row i.
Var route_rescale_mul(Graph& g, Var tokens, Var guide);

/// relu(tokens) * relu(guide)ᵀ * guide. The trailing guide factor stays
/// unrectified.
Var route_relu_proj(Graph& g, Var tokens, Var guide);

/// Applies the routing kind; None returns the tokens untouched. CrossAttn is
/// rejected here.
Var apply_routing(Graph& g, RoutingKind kind, Var tokens, Var guide);

}  // namespace peftlab
