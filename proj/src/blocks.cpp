#include "peftlab/blocks.hpp"

#include <cmath>

namespace peftlab {

TransformerBlock TransformerBlock::make(std::size_t d, std::size_t heads, std::size_t ffn_mult,
                                        bool causal, Rng& rng, double attn_gain) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " must be divisible by head count " +
                      std::to_string(heads));
  }
  if (attn_gain <= 0.0) throw ConfigError("attn_gain must be positive");
  TransformerBlock b;
  b.query = LinearMap::make(d, d, rng, /*frozen=*/true);
  b.key = LinearMap::make(d, d, rng, true);
  for (std::size_t i = 0; i < d * d; ++i) {
    b.query.weight[i] *= attn_gain;
    b.key.weight[i] *= attn_gain;
  }
  b.value = LinearMap::make(d, d, rng, true);
  b.output = LinearMap::make(d, d, rng, true);
  b.ffn_in = LinearMap::make(d * ffn_mult, d, rng, true);
  b.ffn_out = LinearMap::make(d, d * ffn_mult, rng, true);
  b.ln_attn = LayerNormParams::make(d);
  b.ln_ffn = LayerNormParams::make(d);
  b.heads = heads;
  b.causal = causal;
  return b;
}

std::vector<std::pair<std::string, Tensor*>> TransformerBlock::named_tensors(const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto push_map = [&](const std::string& n, LinearMap& m) {
    out.emplace_back(prefix + "." + n + ".w", &m.weight);
    if (m.bias) out.emplace_back(prefix + "." + n + ".b", &*m.bias);
  };
  push_map("attn.q", query);
  push_map("attn.k", key);
  push_map("attn.v", value);
  push_map("attn.o", output);
  push_map("ffn.in", ffn_in);
  push_map("ffn.out", ffn_out);
  out.emplace_back(prefix + ".ln_attn.g", &ln_attn.gain);
  out.emplace_back(prefix + ".ln_attn.b", &ln_attn.bias);
  out.emplace_back(prefix + ".ln_ffn.g", &ln_ffn.gain);
  out.emplace_back(prefix + ".ln_ffn.b", &ln_ffn.bias);
  return out;
}

Var mha_forward(Graph& g, TransformerBlock& b, Var x, std::optional<Var> guide_raw,
                AttentionTrace* trace) {
  const Tensor& xv = g.value(x);
  const std::size_t L = xv.rows();
  const std::size_t d = b.width();
  const std::size_t dh = d / b.heads;

  Var q = b.lora_query ? lora_forward(g, *b.lora_query, b.query, x, guide_raw)
                       : linear_forward(g, b.query, x);
  Var k = linear_forward(g, b.key, x);
  Var v = b.lora_value ? lora_forward(g, *b.lora_value, b.value, x, guide_raw)
                       : linear_forward(g, b.value, x);

  Tensor avg_probs({L, L});
  std::vector<Var> head_ctx;
  head_ctx.reserve(b.heads);
  for (std::size_t h = 0; h < b.heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, dh);
    Var kh = g.slice_cols(k, h * dh, dh);
    Var vh = g.slice_cols(v, h * dh, dh);
    Var scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var probs = b.causal ? g.causal_softmax_rows(scores) : g.softmax_rows(scores);
    if (trace) {
      const Tensor& p = g.value(probs);
      for (std::size_t i = 0; i < p.numel(); ++i) avg_probs[i] += p[i] / static_cast<double>(b.heads);
    }
    head_ctx.push_back(g.matmul(probs, vh));
  }
  if (trace) trace->layers.push_back(std::move(avg_probs));
  return linear_forward(g, b.output, g.concat_cols(head_ctx));
}

Var block_forward(Graph& g, TransformerBlock& b, Var x, std::optional<Var> guide_raw,
                  AttentionTrace* trace) {
  Var attn = mha_forward(g, b, layer_norm_forward(g, b.ln_attn, x), guide_raw, trace);
  x = g.add(x, attn);
  if (b.adapter_attn) x = adapter_forward(g, *b.adapter_attn, x, guide_raw);

  Var h = linear_forward(g, b.ffn_in, layer_norm_forward(g, b.ln_ffn, x));
  Var ffn = linear_forward(g, b.ffn_out, g.gelu(h));
  x = g.add(x, ffn);
  if (b.adapter_ffn) x = adapter_forward(g, *b.adapter_ffn, x, guide_raw);
  return x;
}

Var embed_tokens(Graph& g, Tensor& table, const std::vector<int>& ids) {
  return g.gather_rows(g.leaf(table), ids);
}

}  // namespace peftlab
