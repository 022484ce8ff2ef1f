#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "isoseg/errors.hpp"
#include "isoseg/tensor.hpp"

namespace isoseg {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter tensor.  Moments are kept in
/// double regardless of the parameter scalar type so update math is stable.
struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;

  void ensure(std::size_t n) {
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    } else if (m.size() != n) {
      throw InternalError("AdamState size mismatch");
    }
  }
};

/// One Adam update with bias correction; `lr` overrides cfg.lr so schedules
/// can be applied per step.
template <typename S>
void adam_step(Tensor<S>& param, const Tensor<S>& grad, AdamState& st, const AdamConfig& cfg,
               double lr) {
  require_same_shape(param, grad, "adam_step");
  st.ensure(param.size());
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = static_cast<double>(grad.data[i]);
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    param.data[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Stepped exponential decay: lr0 * decay^floor(step / interval).
inline double lr_schedule(double lr0, double decay, std::size_t interval, std::size_t step) {
  if (interval == 0) throw ParameterError("lr_schedule: interval must be positive");
  return lr0 * std::pow(decay, static_cast<double>(step / interval));
}

}  // namespace isoseg
