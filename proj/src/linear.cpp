#include "peftlab/linear.hpp"

#include <cmath>

namespace peftlab {

LinearMap LinearMap::make(std::size_t out_dim, std::size_t in_dim, Rng& rng, bool frozen,
                          bool with_bias) {
  LinearMap m;
  m.weight = Tensor::randn({out_dim, in_dim}, rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  if (with_bias) m.bias = Tensor::zeros({1, out_dim});
  m.frozen = frozen;
  m.set_frozen(frozen);
  return m;
}

LinearMap LinearMap::identity(std::size_t dim, bool frozen) {
  LinearMap m;
  m.weight = Tensor::zeros({dim, dim});
  for (std::size_t i = 0; i < dim; ++i) m.weight.at(i, i) = 1.0;
  m.bias = Tensor::zeros({1, dim});
  m.frozen = frozen;
  m.set_frozen(frozen);
  return m;
}

void LinearMap::set_frozen(bool value) {
  frozen = value;
  weight.requires_grad = !value;
  if (bias) bias->requires_grad = !value;
}

Var linear_forward(Graph& g, LinearMap& m, Var x) {
  const Tensor& xv = g.value(x);
  if (!xv.is_matrix() || xv.cols() != m.in_dim()) {
    throw DimError("linear_forward width mismatch: input " + shape_str(xv.shape()) + " vs weight " +
                   shape_str(m.weight.shape()));
  }
  Var out = g.matmul(x, g.transpose(g.leaf(m.weight)));
  if (m.bias) {
    out = g.add(out, g.broadcast_rows(g.leaf(*m.bias), xv.rows()));
  }
  return out;
}

LayerNormParams LayerNormParams::make(std::size_t dim, bool frozen) {
  LayerNormParams ln;
  ln.gain = Tensor::ones({1, dim});
  ln.bias = Tensor::zeros({1, dim});
  ln.frozen = frozen;
  ln.set_frozen(frozen);
  return ln;
}

void LayerNormParams::set_frozen(bool value) {
  frozen = value;
  gain.requires_grad = !value;
  bias.requires_grad = !value;
}

Var layer_norm_forward(Graph& g, LayerNormParams& ln, Var x) {
  return g.layer_norm_rows(x, g.leaf(ln.gain), g.leaf(ln.bias));
}

}  // namespace peftlab
