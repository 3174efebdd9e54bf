#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

/// Handle to a node on a Graph tape.
struct Var {
  int id = -1;
};

/// Append-only reverse-mode tape. Operations record their inputs and a
/// backward closure; `backward` walks the tape once in reverse and flushes
/// gradients into the external leaf tensors that require them.
///
/// A Graph instance is single-writer. Distinct instances share nothing and
/// may be used concurrently.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers an external tensor as a leaf. Repeated calls with the same
  /// tensor return the same node. Gradients accumulate into `t.grad` when
  /// `t.requires_grad` is set; frozen leaves never receive a gradient.
  Var leaf(Tensor& t);

  /// Tape-owned constant; never receives a gradient.
  Var constant(Tensor t);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var transpose(Var a);

  /// Replicates a single-row tensor into `rows` identical rows. The only
  /// broadcast in the library; backward sums row gradients into the source.
  Var broadcast_rows(Var v, std::size_t rows);

  Var relu(Var x);
  Var gelu(Var x);
  Var softmax_rows(Var x);
  /// Row-wise softmax over keys j <= i; columns j > i get exact zero weight.
  Var causal_softmax_rows(Var x);

  Var mean_rows(Var x);
  Var sum(Var x);
  Var frobenius_norm(Var x);

  Var gather_rows(Var table, std::vector<int> ids);
  Var take_rows(Var x, std::size_t begin, std::size_t count);
  Var concat_rows(Var a, Var b);
  Var slice_cols(Var x, std::size_t begin, std::size_t count);
  Var concat_cols(const std::vector<Var>& parts);

  /// y = gain * (x - mean) / sqrt(var + eps) + bias, per row.
  /// gain and bias are 1 x cols(x).
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

  /// Mean negative log-softmax probability of `targets` over rows whose
  /// target is not `ignore_index`. Requires at least one counted row.
  Var cross_entropy(Var logits, std::vector<int> targets, int ignore_index = -1);

  const Tensor& value(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse pass from a scalar loss. Each node is visited exactly once.
  /// Calling again without reset accumulates into leaf gradients.
  void backward(Var loss);

  /// Clears the tape. External leaf tensors and their gradients are kept.
  void reset();

 private:
  struct Node {
    Tensor value;
    Tensor* external = nullptr;
    bool needs_grad = false;
    std::function<void(Graph&)> backprop;
  };

  int alloc(Tensor value, bool needs_grad);
  const Tensor& val(Var v) const;
  bool wants(Var v) const { return nodes_[v.id].needs_grad; }
  std::vector<double>& gbuf(int id);
  void check(Var v) const;

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Tensor*, int> leaf_cache_;
};

}  // namespace peftlab
