#pragma once

#include <optional>
#include <string>

#include "peftlab/linear.hpp"
#include "peftlab/routing.hpp"

namespace peftlab {

enum class PeftKind { Lora, Adapter };
enum class Nonlinearity { Relu, Gelu };

/// Bottleneck mapping chain. Standard goes d -> r -> d. Quarter goes
/// d -> r/4 -> r -> d through an extra mid projection, used to compare the
/// cross-attention comparator and separate-mapping variants at matched
/// parameter budgets.
enum class ChainKind { Standard, Quarter };

PeftKind parse_peft_kind(const std::string& name);
std::string peft_kind_name(PeftKind kind);
Nonlinearity parse_nonlinearity(const std::string& name);
std::string nonlinearity_name(Nonlinearity n);
ChainKind parse_chain_kind(const std::string& name);
std::string chain_kind_name(ChainKind c);

struct PeftUnitSpec {
  PeftKind kind = PeftKind::Lora;
  std::size_t rank = 4;
  std::optional<double> alpha;          // defaults to rank
  RoutingKind routing = RoutingKind::None;
  bool share_down = true;               // guidance reuses w_down
  ChainKind chain = ChainKind::Standard;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  bool pool_guide = true;               // mean-pool multi-row guidance features

  double resolved_alpha() const { return alpha ? *alpha : static_cast<double>(rank); }
};

/// One low-rank bottleneck unit. LoRA adds a scaled delta next to a frozen
/// base map; Adapter is a residual bottleneck applied to the hidden state
/// itself. The optional routing operation runs inside the bottleneck and, for
/// Adapter, strictly before the nonlinearity.
struct PeftUnit {
  PeftUnitSpec spec;
  std::string id;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;

  Tensor w_down;                     // bottleneck_in x d_in
  Tensor w_up;                       // d_out x r
  std::optional<Tensor> b_down;      // 1 x r (Adapter)
  std::optional<Tensor> b_up;        // 1 x d_out (Adapter)
  std::optional<Tensor> w_down_guide;  // bottleneck_in x d_in, share_down=false
  std::optional<Tensor> w_query;     // cross-attention comparator maps
  std::optional<Tensor> w_key;
  std::optional<Tensor> w_value;
  std::optional<Tensor> w_mid;       // r x r/4, quarter chain

  std::size_t bottleneck_in() const {
    return spec.chain == ChainKind::Quarter ? spec.rank / 4 : spec.rank;
  }

  /// Trainable tensors in a fixed order (checkpoint and optimizer order).
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::size_t param_count() const;
};

PeftUnit make_peft_unit(const PeftUnitSpec& spec, std::size_t in_dim, std::size_t out_dim,
                        const std::string& id, Rng& rng);

/// Down-projects and (per unit config) pools the raw guidance feature
/// (L_v x d) into the bottleneck space.
Var unit_guide(Graph& g, PeftUnit& u, Var guide_raw);

/// base(x) + (alpha/r) * up(route(down(x), guide)). With routing None this is
/// plain LoRA.
Var lora_forward(Graph& g, PeftUnit& u, LinearMap& base, Var x, std::optional<Var> guide_raw);

/// The LoRA delta alone, already scaled by alpha/r.
Var lora_delta(Graph& g, PeftUnit& u, Var x, std::optional<Var> guide_raw);

/// x + up(sigma(route(down(x) + b_down, guide))) + b_up.
Var adapter_forward(Graph& g, PeftUnit& u, Var x, std::optional<Var> guide_raw);

/// Cross-attention comparator: query from x, key/value from the raw feature
/// rows (never pooled), softmax over the feature rows, then the configured
/// up-chain. Returns the delta in model width.
Var cross_attn_delta(Graph& g, PeftUnit& u, Var x, Var guide_raw);

// Analytic parameter counts for square bias-free maps of width d.
std::size_t lora_routed_param_count(std::size_t d, std::size_t r, bool share_down, ChainKind chain);
std::size_t adapter_routed_param_count(std::size_t d, std::size_t r, bool with_biases);
std::size_t cross_attn_param_count(std::size_t d, std::size_t r, ChainKind chain);

}  // namespace peftlab
