#include "dadt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dadt/errors.hpp"

namespace dadt {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Tensor& analytic, const Tensor& reference, double floor) {
  return max_abs_diff(analytic, reference) / std::max(max_abs(reference), floor);
}

}  // namespace dadt
