#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace peftlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid run configuration (unknown key, bad enum string, impossible dims).
// The CLI maps this to exit code 2; every other Error maps to exit code 1.
struct ConfigError : Error {
  using Error::Error;
};

struct DimError : Error {
  using Error::Error;
};

class Rng;

std::string shape_str(const std::vector<std::size_t>& shape);

/// Dense row-major array of 64-bit reals. Gradient storage lives next to the
/// values; reverse-mode differentiation accumulates into `grad` for tensors
/// with `requires_grad` set.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor ones(std::vector<std::size_t> shape);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);                // 1 x n
  static Tensor matrix(std::vector<std::vector<double>> rows);  // m x n
  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool is_matrix() const { return shape_.size() == 2; }
  bool is_scalar() const { return data_.size() == 1; }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }
  double item() const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;

  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  void accumulate_grad(const std::vector<double>& g);
  void clear_grad() { grad.reset(); }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace peftlab
