#pragma once

#include "vqat2i/core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace vqat2i::testing {

/// Central-difference gradient check. `fn` evaluates a scalar loss from the
/// current values of `inputs` (which must have requires_grad). Probes at most
/// `max_coords` evenly spaced coordinates per input. Returns the worst
/// relative error  |analytic - numeric| / max(|analytic|, |numeric|, 1).
inline double gradcheck(const std::function<ag::Var()>& fn, std::vector<ag::Var> inputs,
                        double h = 1e-5, index_t max_coords = 64) {
  for (auto& in : inputs) {
    if (in.node()->grad.defined()) in.node()->grad.fill(0);
  }
  ag::Var loss = fn();
  ag::backward(loss);

  double worst = 0;
  for (auto& in : inputs) {
    Tensor& val = in.value();
    const Tensor analytic = in.node()->grad.defined() ? in.node()->grad.clone()
                                                      : Tensor::zeros(val.shape());
    index_t n = val.size();
    index_t stride = std::max<index_t>(1, n / max_coords);
    for (index_t i = 0; i < n; i += stride) {
      double orig = val[i];
      double fp, fm;
      {
        ag::NoGrad ng;
        val[i] = orig + h;
        fp = fn().item();
        val[i] = orig - h;
        fm = fn().item();
        val[i] = orig;
      }
      double numeric = (fp - fm) / (2 * h);
      double a = analytic[i];
      double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace vqat2i::testing
