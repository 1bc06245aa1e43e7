#pragma once

#include <functional>
#include <vector>

#include "bbal/autodiff.hpp"

namespace bbal {

using ParamObjective = std::function<double(const ParamSet&)>;

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every scalar of
/// every trainable parameter. Frozen parameters get zero tensors. `params`
/// is perturbed in place and restored before returning.
std::vector<Tensor> finite_difference_grad(const ParamObjective& objective, ParamSet& params, double h = 1e-5);

/// ||a - b|| / max(||a||, ||b||, floor).
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace bbal
