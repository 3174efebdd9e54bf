#pragma once

#include "peftlab/peft.hpp"

namespace peftlab {

/// Head-averaged attention weights recorded during a forward pass, one L x L
/// matrix per visited block.
struct AttentionTrace {
  std::vector<Tensor> layers;
};

/// Frozen backbone block with pre-norm residual wiring and four optional
/// PEFT slots. Slot pointers are bound by the owning model; the block never
/// owns the units.
struct TransformerBlock {
  LinearMap query, key, value, output;
  LinearMap ffn_in, ffn_out;
  LayerNormParams ln_attn, ln_ffn;
  std::size_t heads = 1;
  bool causal = false;

  PeftUnit* lora_query = nullptr;
  PeftUnit* lora_value = nullptr;
  PeftUnit* adapter_attn = nullptr;
  PeftUnit* adapter_ffn = nullptr;

  std::size_t width() const { return query.out_dim(); }

  /// attn_gain scales the frozen query/key init; large values give sharp,
  /// confident frozen attention patterns.
  static TransformerBlock make(std::size_t d, std::size_t heads, std::size_t ffn_mult, bool causal,
                               Rng& rng, double attn_gain = 1.0);

  std::vector<std::pair<std::string, Tensor*>> named_tensors(const std::string& prefix);
};

/// Scaled dot-product attention over already-normalized inputs. LoRA slots on
/// the query/value maps participate when bound; `guide_raw` is forwarded to
/// them. Appends the head-averaged weights to `trace` when given.
Var mha_forward(Graph& g, TransformerBlock& b, Var x, std::optional<Var> guide_raw,
                AttentionTrace* trace = nullptr);

/// x += MHA(LN(x)); adapter slot; x += FFN(LN(x)); adapter slot.
Var block_forward(Graph& g, TransformerBlock& b, Var x, std::optional<Var> guide_raw,
                  AttentionTrace* trace = nullptr);

/// Row gather from an embedding table.
Var embed_tokens(Graph& g, Tensor& table, const std::vector<int>& ids);

}  // namespace peftlab
