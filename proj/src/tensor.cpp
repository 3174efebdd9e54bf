#include "peftlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "peftlab/rng.hpp"

namespace peftlab {

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (std::size_t e : shape_) {
    if (e == 0) throw DimError("tensor extents must be positive, got " + shape_str(shape_));
    n *= e;
  }
  if (shape_.empty()) throw DimError("tensor shape must not be empty");
  data_.assign(n, 0.0);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::scalar(double value) {
  Tensor t({1});
  t.data_[0] = value;
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  Tensor t({1, values.size()});
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::matrix(std::vector<std::vector<double>> rows) {
  if (rows.empty()) throw DimError("matrix literal must have at least one row");
  const std::size_t n = rows.front().size();
  Tensor t({rows.size(), n});
  std::size_t k = 0;
  for (const auto& r : rows) {
    if (r.size() != n) throw DimError("ragged matrix literal");
    for (double v : r) t.data_[k++] = v;
  }
  return t;
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = rng.gaussian() * stddev;
  return t;
}

std::size_t Tensor::rows() const {
  if (!is_matrix()) throw DimError("rows() on non-matrix tensor " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (!is_matrix()) throw DimError("cols() on non-matrix tensor " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * cols() + j];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * cols() + j];
}

double Tensor::item() const {
  if (!is_scalar()) throw DimError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
  if (g.size() != data_.size()) {
    throw DimError("gradient size mismatch: " + std::to_string(g.size()) + " vs " +
                   std::to_string(data_.size()));
  }
  if (!grad) grad.emplace(data_.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw DimError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace peftlab
