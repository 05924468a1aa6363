#pragma once

#include <cmath>

#include "msl/nn.hpp"

namespace msl {

enum class OptKind : std::uint8_t { SGD, Adam };

/// Optimizer state; moments are allocated only for Adam and mirror the
/// parameter shapes.
template <typename T>
struct OptimState {
  OptKind kind = OptKind::SGD;
  T lr = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  long step = 0;
  Gradients<T> m, v;

  static OptimState sgd(T lr) {
    OptimState s;
    s.kind = OptKind::SGD;
    s.lr = lr;
    return s;
  }
  static OptimState adam(T lr, const Parameters<T>& like) {
    OptimState s;
    s.kind = OptKind::Adam;
    s.lr = lr;
    s.m = zero_like(like);
    s.v = zero_like(like);
    return s;
  }
};

namespace detail {
template <typename T>
void check_step_inputs(const Parameters<T>& params, const Gradients<T>& grads, T lr) {
  // lr = 0 is a legal degenerate step (leaves parameters untouched).
  if (lr < T(0)) throw config_error("optimizer: learning rate must be >= 0");
  if (params.layers.size() != grads.layers.size())
    throw invariant_error("optimizer: parameter/gradient layer mismatch");
  if (!grads.all_finite())
    throw numeric_error("optimizer: non-finite gradient, training aborted");
}
}  // namespace detail

/// W <- W - lr * g, elementwise.
template <typename T>
void sgd_step(Parameters<T>& params, const Gradients<T>& grads, T lr) {
  detail::check_step_inputs(params, grads, lr);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& p = params.layers[i];
    const auto& g = grads.layers[i];
    for (std::size_t j = 0; j < p.w.numel(); ++j) p.w[j] -= lr * g.w[j];
    for (std::size_t j = 0; j < p.b.numel(); ++j) p.b[j] -= lr * g.b[j];
  }
}

/// Standard bias-corrected Adam; advances the step counter.
template <typename T>
void adam_step(Parameters<T>& params, const Gradients<T>& grads, T lr, OptimState<T>& state) {
  detail::check_step_inputs(params, grads, lr);
  if (state.kind != OptKind::Adam) throw config_error("adam_step: state is not Adam");
  state.step += 1;
  const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), state.step));
  const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), state.step));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& p = params.layers[i];
    const auto& g = grads.layers[i];
    auto& m = state.m.layers[i];
    auto& v = state.v.layers[i];
    auto update = [&](Tensor<T>& pw, const Tensor<T>& gw, Tensor<T>& mw, Tensor<T>& vw) {
      for (std::size_t j = 0; j < pw.numel(); ++j) {
        mw[j] = state.beta1 * mw[j] + (T(1) - state.beta1) * gw[j];
        vw[j] = state.beta2 * vw[j] + (T(1) - state.beta2) * gw[j] * gw[j];
        const T mhat = mw[j] / c1;
        const T vhat = vw[j] / c2;
        pw[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      }
    };
    if (!p.w.empty()) update(p.w, g.w, m.w, v.w);
    if (!p.b.empty()) update(p.b, g.b, m.b, v.b);
  }
}

/// Single entry point used by the meta outer loop.
template <typename T>
void optimizer_step(Parameters<T>& params, const Gradients<T>& grads, OptimState<T>& state) {
  if (state.kind == OptKind::SGD)
    sgd_step(params, grads, state.lr);
  else
    adam_step(params, grads, state.lr, state);
}

}  // namespace msl
