#pragma once

// Adam with bias correction, operating on leaf parameter tensors. Updates run
// outside any tape scope; moment buffers serialize with checkpoints so a
// resumed run is step-for-step identical.

#include <cmath>
#include <cstdint>
#include <vector>

#include "centermask/common.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor<T>> params, AdamConfig config = {})
      : params_(std::move(params)), config_(config) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
      v_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
    }
  }

  // One update from the gradients currently on the parameters. Parameters
  // without a gradient this step are left untouched (their moments decay on
  // the next contributing step, matching sparse-update practice).
  void step(double lr) {
    ++step_count_;
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T correction1 = T(1) - static_cast<T>(std::pow(config_.beta1, step_count_));
    const T correction2 = T(1) - static_cast<T>(std::pow(config_.beta2, step_count_));
    const T eps = static_cast<T>(config_.epsilon);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      const std::vector<T>& g = params_[i].grad();
      std::vector<T>& w = params_[i].mutable_values();
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        T m_hat = m[j] / correction1;
        T v_hat = v[j] / correction2;
        w[j] -= rate * m_hat / (std::sqrt(v_hat) + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t step_count_ = 0;
};

}  // namespace centermask
