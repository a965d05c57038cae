#include "decaps/gradcheck.hpp"

#include <cmath>

namespace decaps {

namespace {

double eval_scalar(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tensor out = f(x);
  if (out.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  return out.scalar();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol) {
  if (step <= 0.0 || tol <= 0.0) throw ContractError("grad_check: step and tol must be positive");

  // Determinism probe: two forward passes must agree bitwise.
  const double probe1 = eval_scalar(f, point);
  const double probe2 = eval_scalar(f, point);
  if (probe1 != probe2) {
    throw OracleError("grad_check: f is not deterministic (forward passes disagree)");
  }

  // Reverse-mode gradient at the point.
  Tensor x = Tensor::from_data(point.shape(), std::vector<double>(point.data().begin(),
                                                                  point.data().end()),
                               /*requires_grad=*/true);
  Tensor loss = f(x);
  if (loss.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<double> autodiff(x.grad().begin(), x.grad().end());

  GradCheckReport report;
  std::vector<double> values(point.data().begin(), point.data().end());
  const int64_t n = static_cast<int64_t>(values.size());
  for (int64_t i = 0; i < n; ++i) {
    const double orig = values[i];
    values[i] = orig + step;
    const double fp = eval_scalar(f, Tensor::from_data(point.shape(), values));
    values[i] = orig - step;
    const double fm = eval_scalar(f, Tensor::from_data(point.shape(), values));
    values[i] = orig;

    const double f0 = probe1;
    const double slope_r = (fp - f0) / step;
    const double slope_l = (f0 - fm) / step;
    // At a kink the one-sided slopes differ by O(1) while smooth curvature
    // only contributes O(step); sqrt(step) separates the regimes.
    const double slope_scale = std::max({1.0, std::abs(slope_r), std::abs(slope_l)});
    if (std::abs(slope_r - slope_l) > 10.0 * std::sqrt(step) * slope_scale) {
      report.excluded.push_back(i);
      continue;
    }

    const double central = (fp - fm) / (2.0 * step);
    const double rel = std::abs(central - autodiff[i]) /
                       std::max({1.0, std::abs(central), std::abs(autodiff[i])});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = i;
    }
    ++report.checked;
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace decaps
