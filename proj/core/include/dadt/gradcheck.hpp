#pragma once

#include <functional>

#include "dadt/tensor.hpp"

namespace dadt {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// Independent of the reverse-mode engine; used as its oracle.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h = 1e-4);

/// max_i |a_i - b_i| / max(max_i |b_i|, floor). Normwise rather than
/// per-coordinate so near-zero entries do not dominate.
double relative_error(const Tensor& analytic, const Tensor& reference, double floor = 1e-12);

}  // namespace dadt
