#pragma once

#include <cstdint>
#include <vector>

#include "decaps/tensor.hpp"

namespace decaps {

// Adam with bias correction over a fixed set of registered parameters.
// Moment buffers are addressed by registration order; step() validates that
// the caller passes exactly the registered tensors.
class AdamState {
 public:
  AdamState(std::vector<Tensor> params, double learning_rate, double beta1,
            double beta2, double epsilon = 1e-8);

  void step(const GradStore& grads);

  int64_t step_count() const { return step_count_; }
  double learning_rate() const { return lr_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double epsilon() const { return eps_; }
  const std::vector<Tensor>& params() const { return params_; }

  // Checkpoint access; moments are stored per parameter in registration order.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(int64_t step_count, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v);

 private:
  std::vector<Tensor> params_;
  double lr_, beta1_, beta2_, eps_;
  int64_t step_count_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Single free-function form: one update over (params, grads) held in `state`.
void adam_step(AdamState& state, const GradStore& grads);

}  // namespace decaps
