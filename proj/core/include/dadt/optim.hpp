#pragma once

#include <map>
#include <string>

#include "dadt/graph.hpp"
#include "dadt/parameters.hpp"

namespace dadt {

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8) and optional
/// global-norm gradient clipping.
class AdamOptimizer {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
  };

  explicit AdamOptimizer(Options options) : options_(options) {}

  /// Applies one update. Parameters without a gradient entry are untouched.
  void step(ParameterSet& params, const TensorMap& grads);

  long steps() const noexcept { return step_; }

 private:
  Options options_;
  long step_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

}  // namespace dadt
