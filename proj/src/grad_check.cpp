#include "peftlab/grad_check.hpp"

#include <cmath>

namespace peftlab {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double eps) {
  if (eps <= 0.0) throw Error("finite_diff_grad requires eps > 0");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(probe);
    probe[i] = saved - eps;
    const double down = f(probe);
    probe[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw DimError("max_rel_err length mismatch: " + std::to_string(a.size()) + " vs " +
                   std::to_string(b.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

double max_rel_err(const Tensor& autodiff_grad, const Tensor& numeric_grad) {
  return max_rel_err(autodiff_grad.data(), numeric_grad.data());
}

}  // namespace peftlab
