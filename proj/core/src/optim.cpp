// SPDX-License-Identifier: Apache-2.0
#include "dha/optim.hpp"

#include <cmath>
#include <numbers>

#include "dha/errors.hpp"

namespace dha {

void Adam::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    auto g = grads[i]->values();
    auto m = m_[i].values();
    auto v = v_[i].values();
    if (g.size() != p.size() || m.size() != p.size()) {
      throw DimensionError("adam: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

double cosine_lr(double peak, std::size_t step, std::size_t total, double floor_fraction) {
  if (total == 0) return peak;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak * (floor_fraction + (1.0 - floor_fraction) * cosine);
}

std::vector<Matrix*> parameter_pointers(ToyModel& model) {
  std::vector<Matrix*> out;
  model.for_each_parameter([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> parameter_pointers(const ToyModel& model) {
  std::vector<const Matrix*> out;
  model.for_each_parameter([&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<Matrix*> omega_pointers(FusionOperator& op) {
  std::vector<Matrix*> out;
  for (auto& lf : op.layers) {
    out.push_back(&lf.key.omega);
    out.push_back(&lf.value.omega);
  }
  return out;
}

std::vector<const Matrix*> omega_pointers(const FusionOperator& op) {
  std::vector<const Matrix*> out;
  for (const auto& lf : op.layers) {
    out.push_back(&lf.key.omega);
    out.push_back(&lf.value.omega);
  }
  return out;
}

}  // namespace dha
