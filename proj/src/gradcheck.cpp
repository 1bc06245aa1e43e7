#include "bbal/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "bbal/error.hpp"

namespace bbal {

std::vector<Tensor> finite_difference_grad(const ParamObjective& objective, ParamSet& params, double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::invalid_input, "finite_difference_grad: step must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor g(params.value(i).shape());
    if (params.trainable(i)) {
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double saved = params.value(i)[j];
        params.value(i)[j] = saved + h;
        const double up = objective(params);
        params.value(i)[j] = saved - h;
        const double down = objective(params);
        params.value(i)[j] = saved;
        g[j] = (up - down) / (2.0 * h);
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw Error(ErrorCode::invalid_input, "relative_error: shape mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max({l2_norm(a.values()), l2_norm(b.values()), floor});
  return std::sqrt(diff) / scale;
}

}  // namespace bbal
