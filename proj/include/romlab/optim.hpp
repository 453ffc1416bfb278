#pragma once

#include <cmath>
#include <cstdint>

#include "romlab/errors.hpp"
#include "romlab/model.hpp"

namespace romlab {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
struct AdamWState {
  AdamWHyper hyper;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::uint64_t step = 0;

  static AdamWState for_params(const Parameters<T>& params, AdamWHyper hyper = {}) {
    AdamWState s;
    s.hyper = hyper;
    for (const auto& t : params.tensors) {
      s.m.push_back(Matrix<T>::Zero(t.rows(), t.cols()));
      s.v.push_back(Matrix<T>::Zero(t.rows(), t.cols()));
    }
    return s;
  }
};

// Decoupled weight decay:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// `lr` overrides hyper.lr when a schedule is in use. Non-finite gradients abort
// the step before any state changes.
template <class T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, AdamWState<T>& state, double lr) {
  if (!(lr >= 0.0)) throw InvalidConfig("learning rate must be non-negative");
  for (std::size_t t = 0; t < grads.size(); ++t)
    if (!grads.tensors[t].allFinite()) throw NumericError("non-finite gradient in " + grads.names[t]);

  const auto& h = state.hyper;
  state.step += 1;
  const double step = static_cast<double>(state.step);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, step));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, step));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T eps = static_cast<T>(h.eps), wd = static_cast<T>(h.weight_decay), rate = static_cast<T>(lr);

  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& theta = params.tensors[t];
    const auto& g = grads.tensors[t];
    auto& m = state.m[t];
    auto& v = state.v[t];
    const Eigen::Index n = theta.size();
    T* pt = theta.data();
    const T* pg = g.data();
    T* pm = m.data();
    T* pv = v.data();
    for (Eigen::Index i = 0; i < n; ++i) {
      pm[i] = b1 * pm[i] + (T(1) - b1) * pg[i];
      pv[i] = b2 * pv[i] + (T(1) - b2) * pg[i] * pg[i];
      const T m_hat = pm[i] / c1;
      const T v_hat = pv[i] / c2;
      pt[i] -= rate * (m_hat / (std::sqrt(v_hat) + eps) + wd * pt[i]);
    }
  }
}

template <class T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, AdamWState<T>& state) {
  adamw_step(params, grads, state, state.hyper.lr);
}

// Linear warmup over the first `warmup_frac` of steps, then linear decay to zero.
inline double warmup_linear_lr(double peak, std::uint64_t step, std::uint64_t total, double warmup_frac) {
  if (total == 0) return peak;
  const double warm = std::floor(warmup_frac * static_cast<double>(total));
  const double s = static_cast<double>(step) + 1.0;
  if (warm > 0 && s <= warm) return peak * s / warm;
  const double remaining = static_cast<double>(total) - warm;
  if (remaining <= 0) return peak;
  return peak * std::max(0.0, (static_cast<double>(total) - s + 1.0) / remaining);
}

}  // namespace romlab
