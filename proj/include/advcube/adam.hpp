#pragma once

#include "advcube/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace advcube {

struct AdamHyper {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamState {
  long step = 0;
  Tensor<Scalar> m;
  Tensor<Scalar> v;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(const Shape& shape, AdamHyper h) : m(shape), v(shape), hyper(h) {}
};

/// One bias-corrected Adam update. Moments are kept in the parameter's scalar
/// type; the correction factors are evaluated in double.
template <typename Scalar>
std::pair<Tensor<Scalar>, AdamState<Scalar>> adam_step(const Tensor<Scalar>& param, const Tensor<Scalar>& grad,
                                                       AdamState<Scalar> state) {
  if (param.shape() != grad.shape()) {
    throw std::invalid_argument("adam_step: gradient shape " + shape_string(grad.shape()) +
                                " does not match parameter " + shape_string(param.shape()));
  }
  if (state.step < 0) throw std::invalid_argument("adam_step: negative step count");
  if (state.m.empty()) state.m = Tensor<Scalar>(param.shape());
  if (state.v.empty()) state.v = Tensor<Scalar>(param.shape());
  if (state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw std::invalid_argument("adam_step: moment shape does not match parameter " + shape_string(param.shape()));
  }
  const auto& h = state.hyper;
  state.step += 1;
  const auto b1 = static_cast<Scalar>(h.beta1);
  const auto b2 = static_cast<Scalar>(h.beta2);
  state.m.data() = b1 * state.m.data() + (Scalar(1) - b1) * grad.data();
  state.v.data() = b2 * state.v.data() + (Scalar(1) - b2) * grad.data().cwiseAbs2();
  const double m_corr = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double v_corr = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));

  Tensor<Scalar> updated = param;
  updated.data().array() -=
      static_cast<Scalar>(h.lr) * (state.m.data().array() / static_cast<Scalar>(m_corr)) /
      ((state.v.data().array() / static_cast<Scalar>(v_corr)).sqrt() + static_cast<Scalar>(h.epsilon));
  return {std::move(updated), std::move(state)};
}

}  // namespace advcube
