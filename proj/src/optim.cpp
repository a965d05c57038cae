#include "decaps/optim.hpp"

#include <cmath>

namespace decaps {

AdamState::AdamState(std::vector<Tensor> params, double learning_rate, double beta1,
                     double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2),
      eps_(epsilon) {
  if (lr_ <= 0.0) throw ConfigError("adam: learning rate must be positive");
  if (beta1_ < 0.0 || beta1_ >= 1.0 || beta2_ < 0.0 || beta2_ >= 1.0) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.defined() || !p.requires_grad()) {
      throw ContractError("adam: parameters must be defined and tracked");
    }
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamState::step(const GradStore& grads) {
  for (const auto& [node, g] : grads.entries()) {
    bool registered = false;
    for (const Tensor& p : params_) {
      if (p.node() == node) {
        registered = true;
        break;
      }
    }
    if (!registered) throw ContractError("adam: gradient for unregistered parameter");
    (void)g;
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (size_t k = 0; k < params_.size(); ++k) {
    const std::vector<double>* g = grads.find(params_[k].node());
    auto& m = m_[k];
    auto& v = v_[k];
    auto data = params_[k].mutable_data();
    const int64_t n = static_cast<int64_t>(data.size());
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void AdamState::restore(int64_t step_count, std::vector<std::vector<double>> m,
                        std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw ContractError("adam restore: moment count mismatch");
  }
  for (size_t k = 0; k < params_.size(); ++k) {
    if (m[k].size() != static_cast<size_t>(params_[k].size()) ||
        v[k].size() != static_cast<size_t>(params_[k].size())) {
      throw ContractError("adam restore: moment shape mismatch");
    }
  }
  step_count_ = step_count;
  m_ = std::move(m);
  v_ = std::move(v);
}

void adam_step(AdamState& state, const GradStore& grads) { state.step(grads); }

}  // namespace decaps
