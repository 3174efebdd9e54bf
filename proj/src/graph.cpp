#include "peftlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace peftlab {

namespace {

// C (M x N) += op(A) * op(B), where op(A) is M x K and op(B) is K x N.
// ta/tb flag that the stored buffer holds the transpose of op(A)/op(B).
void mm_acc(std::vector<double>& c, const std::vector<double>& a, const std::vector<double>& b,
            std::size_t m, std::size_t k, std::size_t n, bool ta, bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : &b[p * n];
      double* crow = &c[i * n];
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

constexpr double kGeluTanhCoeff = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubicCoeff = 0.044715;           // tanh-approximation cubic term

}  // namespace

void Graph::check(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid graph handle");
}

int Graph::alloc(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Graph::val(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

const Tensor& Graph::value(Var v) const { return val(v); }

std::vector<double>& Graph::gbuf(int id) {
  if (grads_[id].empty()) grads_[id].assign(nodes_[id].value.numel(), 0.0);
  return grads_[id];
}

Var Graph::leaf(Tensor& t) {
  auto it = leaf_cache_.find(&t);
  if (it != leaf_cache_.end()) return Var{it->second};
  const int id = alloc(t, t.requires_grad);
  nodes_[id].external = &t;
  leaf_cache_.emplace(&t, id);
  return Var{id};
}

Var Graph::constant(Tensor t) { return Var{alloc(std::move(t), false)}; }

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.is_matrix() || !B.is_matrix()) {
    throw DimError("matmul requires matrices, got " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  }
  if (A.cols() != B.rows()) {
    throw DimError("matmul inner extents differ: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out({m, n});
  mm_acc(out.data(), A.data(), B.data(), m, k, n, false, false);
  const bool ng = wants(a) || wants(b);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, b, m, k, n](Graph& g) {
      const auto& dc = g.grads_[id];
      if (g.wants(a)) mm_acc(g.gbuf(a.id), dc, g.nodes_[b.id].value.data(), m, n, k, false, true);
      if (g.wants(b)) mm_acc(g.gbuf(b.id), g.nodes_[a.id].value.data(), dc, k, m, n, true, false);
    };
  }
  return Var{id};
}

Var Graph::add(Var a, Var b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!same_shape(A, B)) {
    throw DimError("elementwise add shape mismatch: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  const bool ng = wants(a) || wants(b);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, b](Graph& g) {
      const auto& dc = g.grads_[id];
      if (g.wants(a)) {
        auto& ga = g.gbuf(a.id);
        for (std::size_t i = 0; i < dc.size(); ++i) ga[i] += dc[i];
      }
      if (g.wants(b)) {
        auto& gb = g.gbuf(b.id);
        for (std::size_t i = 0; i < dc.size(); ++i) gb[i] += dc[i];
      }
    };
  }
  return Var{id};
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!same_shape(A, B)) {
    throw DimError("elementwise mul shape mismatch: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  const bool ng = wants(a) || wants(b);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, b](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& av = g.nodes_[a.id].value.data();
      const auto& bv = g.nodes_[b.id].value.data();
      if (g.wants(a)) {
        auto& ga = g.gbuf(a.id);
        for (std::size_t i = 0; i < dc.size(); ++i) ga[i] += dc[i] * bv[i];
      }
      if (g.wants(b)) {
        auto& gb = g.gbuf(b.id);
        for (std::size_t i = 0; i < dc.size(); ++i) gb[i] += dc[i] * av[i];
      }
    };
  }
  return Var{id};
}

Var Graph::scale(Var a, double s) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  const bool ng = wants(a);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, s](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& ga = g.gbuf(a.id);
      for (std::size_t i = 0; i < dc.size(); ++i) ga[i] += s * dc[i];
    };
  }
  return Var{id};
}

Var Graph::transpose(Var a) {
  const Tensor& A = val(a);
  if (!A.is_matrix()) throw DimError("transpose requires a matrix, got " + shape_str(A.shape()));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
  const bool ng = wants(a);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, m, n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& ga = g.gbuf(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += dc[j * m + i];
    };
  }
  return Var{id};
}

Var Graph::broadcast_rows(Var v, std::size_t rows) {
  const Tensor& V = val(v);
  if (!V.is_matrix() || V.rows() != 1) {
    throw DimError("broadcast_rows requires a single-row input, got " + shape_str(V.shape()));
  }
  if (rows == 0) throw DimError("broadcast_rows requires rows >= 1");
  const std::size_t n = V.cols();
  Tensor out({rows, n});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = V[j];
  const bool ng = wants(v);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, v, rows, n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& gv = g.gbuf(v.id);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] += dc[i * n + j];
    };
  }
  return Var{id};
}

Var Graph::relu(Var x) {
  Tensor out = val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& xv = g.nodes_[x.id].value.data();
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < dc.size(); ++i) gx[i] += xv[i] > 0.0 ? dc[i] : 0.0;
    };
  }
  return Var{id};
}

Var Graph::gelu(Var x) {
  Tensor out = val(x);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = out[i];
    const double t = std::tanh(kGeluTanhCoeff * (v + kGeluCubicCoeff * v * v * v));
    out[i] = 0.5 * v * (1.0 + t);
  }
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& xv = g.nodes_[x.id].value.data();
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < dc.size(); ++i) {
        const double v = xv[i];
        const double t = std::tanh(kGeluTanhCoeff * (v + kGeluCubicCoeff * v * v * v));
        const double du = kGeluTanhCoeff * (1.0 + 3.0 * kGeluCubicCoeff * v * v);
        gx[i] += dc[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    };
  }
  return Var{id};
}

namespace {

// Softmax over row entries [0, limit); entries beyond limit get exact zero.
void softmax_row(const double* x, double* y, std::size_t limit, std::size_t n) {
  double mx = x[0];
  for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < limit; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (std::size_t j = 0; j < limit; ++j) y[j] /= z;
  for (std::size_t j = limit; j < n; ++j) y[j] = 0.0;
}

}  // namespace

Var Graph::softmax_rows(Var x) {
  const Tensor& X = val(x);
  if (!X.is_matrix()) throw DimError("softmax_rows requires a matrix, got " + shape_str(X.shape()));
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) softmax_row(&X.data()[i * n], &out.data()[i * n], n, n);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, m, n](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& y = g.nodes_[id].value.data();
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += dc[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (dc[i * n + j] - s);
      }
    };
  }
  return Var{id};
}

Var Graph::causal_softmax_rows(Var x) {
  const Tensor& X = val(x);
  if (!X.is_matrix() || X.rows() != X.cols()) {
    throw DimError("causal_softmax_rows requires a square matrix, got " + shape_str(X.shape()));
  }
  const std::size_t n = X.rows();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) softmax_row(&X.data()[i * n], &out.data()[i * n], i + 1, n);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, n](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& y = g.nodes_[id].value.data();
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j <= i; ++j) s += dc[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j <= i; ++j) gx[i * n + j] += y[i * n + j] * (dc[i * n + j] - s);
      }
    };
  }
  return Var{id};
}

Var Graph::mean_rows(Var x) {
  const Tensor& X = val(x);
  if (!X.is_matrix()) throw DimError("mean_rows requires a matrix, got " + shape_str(X.shape()));
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += X.at(i, j);
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, m, n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += dc[j] / static_cast<double>(m);
    };
  }
  return Var{id};
}

Var Graph::sum(Var x) {
  const Tensor& X = val(x);
  double s = 0.0;
  for (std::size_t i = 0; i < X.numel(); ++i) s += X[i];
  const bool ng = wants(x);
  const int id = alloc(Tensor::scalar(s), ng);
  if (ng) {
    nodes_[id].backprop = [id, x](Graph& g) {
      const double d = g.grads_[id][0];
      auto& gx = g.gbuf(x.id);
      for (double& v : gx) v += d;
    };
  }
  return Var{id};
}

Var Graph::frobenius_norm(Var x) {
  const Tensor& X = val(x);
  double s = 0.0;
  for (std::size_t i = 0; i < X.numel(); ++i) s += X[i] * X[i];
  const double norm = std::sqrt(s);
  const bool ng = wants(x);
  const int id = alloc(Tensor::scalar(norm), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, norm](Graph& g) {
      if (norm == 0.0) return;  // subgradient 0 at the origin
      const double d = g.grads_[id][0];
      const auto& xv = g.nodes_[x.id].value.data();
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d * xv[i] / norm;
    };
  }
  return Var{id};
}

Var Graph::gather_rows(Var table, std::vector<int> ids) {
  const Tensor& T = val(table);
  if (!T.is_matrix()) throw DimError("gather_rows requires a matrix table, got " + shape_str(T.shape()));
  if (ids.empty()) throw Error("gather_rows requires at least one id");
  const std::size_t v = T.rows(), n = T.cols();
  for (int idx : ids) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
      throw Error("gather_rows id " + std::to_string(idx) + " out of range [0," + std::to_string(v) + ")");
    }
  }
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = T.at(static_cast<std::size_t>(ids[i]), j);
  const bool ng = wants(table);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, table, ids = std::move(ids), n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& gt = g.gbuf(table.id);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gt[static_cast<std::size_t>(ids[i]) * n + j] += dc[i * n + j];
    };
  }
  return Var{id};
}

Var Graph::take_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& X = val(x);
  if (!X.is_matrix()) throw DimError("take_rows requires a matrix, got " + shape_str(X.shape()));
  if (count == 0 || begin + count > X.rows()) {
    throw DimError("take_rows range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                   ") out of bounds for " + shape_str(X.shape()));
  }
  const std::size_t n = X.cols();
  Tensor out({count, n});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = X.at(begin + i, j);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, begin, count, n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[(begin + i) * n + j] += dc[i * n + j];
    };
  }
  return Var{id};
}

Var Graph::concat_rows(Var a, Var b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.is_matrix() || !B.is_matrix() || A.cols() != B.cols()) {
    throw DimError("concat_rows column mismatch: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  }
  const std::size_t ma = A.rows(), mb = B.rows(), n = A.cols();
  Tensor out({ma + mb, n});
  for (std::size_t i = 0; i < ma * n; ++i) out[i] = A[i];
  for (std::size_t i = 0; i < mb * n; ++i) out[ma * n + i] = B[i];
  const bool ng = wants(a) || wants(b);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, a, b, ma, mb, n](Graph& g) {
      const auto& dc = g.grads_[id];
      if (g.wants(a)) {
        auto& ga = g.gbuf(a.id);
        for (std::size_t i = 0; i < ma * n; ++i) ga[i] += dc[i];
      }
      if (g.wants(b)) {
        auto& gb = g.gbuf(b.id);
        for (std::size_t i = 0; i < mb * n; ++i) gb[i] += dc[ma * n + i];
      }
    };
  }
  return Var{id};
}

Var Graph::slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& X = val(x);
  if (!X.is_matrix()) throw DimError("slice_cols requires a matrix, got " + shape_str(X.shape()));
  if (count == 0 || begin + count > X.cols()) {
    throw DimError("slice_cols range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                   ") out of bounds for " + shape_str(X.shape()));
  }
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = X.at(i, begin + j);
  const bool ng = wants(x);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, begin, count, m, n](Graph& g) {
      const auto& dc = g.grads_[id];
      auto& gx = g.gbuf(x.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += dc[i * count + j];
    };
  }
  return Var{id};
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols requires at least one part");
  const std::size_t m = val(parts[0]).rows();
  std::size_t total = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor& P = val(p);
    if (!P.is_matrix() || P.rows() != m) {
      throw DimError("concat_cols row mismatch at " + shape_str(P.shape()));
    }
    total += P.cols();
    ng = ng || wants(p);
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = val(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out.at(i, off + j) = P.at(i, j);
    off += P.cols();
  }
  const int id = alloc(std::move(out), ng);
  if (ng) {
    std::vector<std::pair<Var, std::size_t>> pieces;  // var, col offset
    off = 0;
    for (Var p : parts) {
      pieces.emplace_back(p, off);
      off += val(p).cols();
    }
    nodes_[id].backprop = [id, pieces = std::move(pieces), m, total](Graph& g) {
      const auto& dc = g.grads_[id];
      for (const auto& [p, o] : pieces) {
        if (!g.wants(p)) continue;
        const std::size_t w = g.nodes_[p.id].value.cols();
        auto& gp = g.gbuf(p.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += dc[i * total + o + j];
      }
    };
  }
  return Var{id};
}

Var Graph::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = val(x);
  const Tensor& G = val(gain);
  const Tensor& B = val(bias);
  if (!X.is_matrix()) throw DimError("layer_norm_rows requires a matrix, got " + shape_str(X.shape()));
  const std::size_t m = X.rows(), n = X.cols();
  if (G.shape() != std::vector<std::size_t>{1, n} || B.shape() != std::vector<std::size_t>{1, n}) {
    throw DimError("layer_norm_rows gain/bias must be 1x" + std::to_string(n));
  }
  Tensor out({m, n});
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X.at(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (X.at(i, j) - mu) * inv;
      xhat[i * n + j] = xh;
      out.at(i, j) = G[j] * xh + B[j];
    }
  }
  const bool ng = wants(x) || wants(gain) || wants(bias);
  const int id = alloc(std::move(out), ng);
  if (ng) {
    nodes_[id].backprop = [id, x, gain, bias, m, n, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)](Graph& g) {
      const auto& dc = g.grads_[id];
      const auto& gv = g.nodes_[gain.id].value.data();
      if (g.wants(x)) {
        auto& gx = g.gbuf(x.id);
        for (std::size_t i = 0; i < m; ++i) {
          double sum1 = 0.0, sum2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dc[i * n + j] * gv[j];
            sum1 += dxh;
            sum2 += dxh * xhat[i * n + j];
          }
          const double invn = 1.0 / static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dc[i * n + j] * gv[j];
            gx[i * n + j] += inv_std[i] * (dxh - sum1 * invn - xhat[i * n + j] * sum2 * invn);
          }
        }
      }
      if (g.wants(gain)) {
        auto& gg = g.gbuf(gain.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += dc[i * n + j] * xhat[i * n + j];
      }
      if (g.wants(bias)) {
        auto& gb = g.gbuf(bias.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += dc[i * n + j];
      }
    };
  }
  return Var{id};
}

Var Graph::cross_entropy(Var logits, std::vector<int> targets, int ignore_index) {
  const Tensor& X = val(logits);
  if (!X.is_matrix()) throw DimError("cross_entropy requires a logits matrix, got " + shape_str(X.shape()));
  const std::size_t m = X.rows(), n = X.cols();
  if (targets.size() != m) {
    throw DimError("cross_entropy expects " + std::to_string(m) + " targets, got " +
                   std::to_string(targets.size()));
  }
  std::size_t counted = 0;
  double loss = 0.0;
  std::vector<double> probs(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const int t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      throw Error("cross_entropy target " + std::to_string(t) + " out of range [0," + std::to_string(n) + ")");
    }
    ++counted;
    double mx = X.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, X.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(X.at(i, j) - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    loss += std::log(z) + mx - X.at(i, static_cast<std::size_t>(t));
  }
  if (counted == 0) throw Error("cross_entropy: every position is ignored");
  loss /= static_cast<double>(counted);
  const bool ng = wants(logits);
  const int id = alloc(Tensor::scalar(loss), ng);
  if (ng) {
    nodes_[id].backprop = [id, logits, targets = std::move(targets), ignore_index, m, n, counted,
                           probs = std::move(probs)](Graph& g) {
      const double d = g.grads_[id][0] / static_cast<double>(counted);
      auto& gx = g.gbuf(logits.id);
      for (std::size_t i = 0; i < m; ++i) {
        const int t = targets[i];
        if (t == ignore_index) continue;
        for (std::size_t j = 0; j < n; ++j) {
          const double onehot = (static_cast<std::size_t>(t) == j) ? 1.0 : 0.0;
          gx[i * n + j] += d * (probs[i * n + j] - onehot);
        }
      }
    };
  }
  return Var{id};
}

void Graph::backward(Var loss) {
  check(loss);
  if (!nodes_[loss.id].value.is_scalar()) {
    throw Error("backward requires a scalar loss, got " + shape_str(nodes_[loss.id].value.shape()));
  }
  grads_.assign(nodes_.size(), {});
  gbuf(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    if (grads_[i].empty()) continue;
    if (nodes_[i].backprop) nodes_[i].backprop(*this);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.external && n.external->requires_grad && !grads_[i].empty()) {
      n.external->accumulate_grad(grads_[i]);
    }
  }
  grads_.clear();
}

void Graph::reset() {
  nodes_.clear();
  grads_.clear();
  leaf_cache_.clear();
}

}  // namespace peftlab
