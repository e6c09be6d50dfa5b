// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dha/fusion.hpp"
#include "dha/linalg.hpp"
#include "dha/model.hpp"

namespace dha {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created on the first step
/// and matched to parameters by position.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

/// Cosine decay from `peak` at step 0 to floor_fraction * peak at `total`.
double cosine_lr(double peak, std::size_t step, std::size_t total, double floor_fraction = 0.1);

std::vector<Matrix*> parameter_pointers(ToyModel& model);
std::vector<const Matrix*> parameter_pointers(const ToyModel& model);
std::vector<Matrix*> omega_pointers(FusionOperator& op);
std::vector<const Matrix*> omega_pointers(const FusionOperator& op);

}  // namespace dha
