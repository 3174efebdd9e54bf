#pragma once

#include <functional>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) per
/// coordinate. `f` must be a pure function of the tensor values; nothing here
/// touches the reverse-mode tape.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double eps);

/// max_i |a_i - b_i| / max(1, |a_i|, |b_i|). The unit floor keeps coordinates
/// with near-zero gradients from dominating the comparison.
double max_rel_err(const std::vector<double>& a, const std::vector<double>& b);
double max_rel_err(const Tensor& autodiff_grad, const Tensor& numeric_grad);

struct GradCheckCase {
  std::string name;
  double rel_err = 0.0;
};

/// Finite-difference sweep over every differentiable tape operation, every
/// routing kind inside both PEFT unit kinds, the cross-attention comparator
/// chains, and full two-block models of all three architectures.
std::vector<GradCheckCase> run_grad_check_suite(std::uint64_t seed, double eps = 1e-5);

}  // namespace peftlab
