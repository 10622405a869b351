#pragma once

#include <functional>

#include "dadt/attacks.hpp"
#include "dadt/diffusion.hpp"
#include "dadt/gradcheck.hpp"
#include "dadt/graph.hpp"
#include "dadt/models.hpp"

namespace dadt::testing {

inline UNetConfig tiny_unet(std::size_t channels, std::size_t size) {
  UNetConfig c;
  c.channels = channels;
  c.height = size;
  c.width = size;
  c.widths = {4, 8};
  c.res_blocks = 1;
  c.time_dim = 8;
  c.groups = 2;
  return c;
}

inline AutoencoderConfig tiny_autoencoder(std::size_t size) {
  AutoencoderConfig c;
  c.height = size;
  c.width = size;
  c.latent_channels = 2;
  c.stem_width = 4;
  c.widths = {4};
  return c;
}

/// eps_theta that returns the noise leaf of the surrounding loss graph.
class EpsOracle : public NoisePredictor {
 public:
  Var build(ComputationGraph& g, Var x_t, Var) const override { return g.input("eps", g.shape(x_t)); }
};

/// eps_theta that ignores its input and returns a fixed tensor.
class ConstantPredictor : public NoisePredictor {
 public:
  explicit ConstantPredictor(Tensor value) : value_(std::move(value)) {}
  Var build(ComputationGraph& g, Var x_t, Var) const override {
    const Shape& s = g.shape(x_t);
    if (value_.shape() == s) return g.constant(value_);
    std::vector<Tensor> copies(s[0], value_);
    return g.constant(stack(copies));
  }

 private:
  Tensor value_;
};

/// Evaluates the scalar output `out` as a function of leaf `leaf`.
inline std::function<double(const Tensor&)> scalar_fn(const ComputationGraph& g, const Bindings& base,
                                                      const std::string& leaf, const std::string& out) {
  return [&g, base, leaf, out](const Tensor& v) {
    Bindings b = base;
    b.bind(leaf, v);
    return evaluate(g, b).at(out).item();
  };
}

inline Tensor image_batch(Rng& rng, std::size_t channels, std::size_t size, double lo = 0.1, double hi = 0.9) {
  return rng.uniform_tensor({1, channels, size, size}, lo, hi);
}

}  // namespace dadt::testing
