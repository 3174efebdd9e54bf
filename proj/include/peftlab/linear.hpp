#pragma once

#include <optional>

#include "peftlab/graph.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

/// Dense affine map y = x Wᵀ (+ bias per row). Frozen maps never receive
/// gradients but still propagate them to their inputs.
struct LinearMap {
  Tensor weight;                // d_out x d_in
  std::optional<Tensor> bias;   // 1 x d_out
  bool frozen = true;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  static LinearMap make(std::size_t out_dim, std::size_t in_dim, Rng& rng, bool frozen,
                        bool with_bias = true);
  static LinearMap identity(std::size_t dim, bool frozen = true);

  void set_frozen(bool value);
};

Var linear_forward(Graph& g, LinearMap& m, Var x);

/// Per-row normalization parameters (gain, bias are 1 x dim).
struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  bool frozen = true;

  static LayerNormParams make(std::size_t dim, bool frozen = true);
  void set_frozen(bool value);
};

Var layer_norm_forward(Graph& g, LayerNormParams& ln, Var x);

}  // namespace peftlab
