#pragma once

#include <functional>
#include <vector>

#include "decaps/tensor.hpp"

namespace decaps {

struct GradCheckReport {
  double max_rel_error = 0.0;     // over checked coordinates
  int64_t worst_coordinate = -1;
  int64_t checked = 0;
  std::vector<int64_t> excluded;  // coordinates skipped at detected kinks
  bool pass = false;
};

// Central-difference check of reverse-mode gradients for a scalar-valued,
// deterministic function of one tensor. Coordinates where the one-sided
// slopes disagree by far more than the step can explain (relu/max kinks) are
// reported as excluded rather than failed. Relative error metric:
// |a - b| / max(1, |a|, |b|).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol);

}  // namespace decaps
