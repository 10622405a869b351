#include <algorithm>
#include <cmath>
#include <set>

#include "dadt/cli/commands.hpp"
#include "dadt/errors.hpp"
#include "dadt/gradcheck.hpp"
#include "dadt/graph.hpp"

namespace dadt::cli {

namespace {

struct Network {
  std::string name;
  ComputationGraph graph;
  Bindings bindings;
  std::map<std::string, Tensor> leaves;  // every differentiable leaf and its value
  std::size_t parameters = 0;
};

std::size_t pick(Rng& rng, std::initializer_list<std::size_t> options) {
  const auto k = rng.uniform_int(0, static_cast<std::int64_t>(options.size()) - 1);
  return *(options.begin() + k);
}

Var leaf(Network& n, Rng& rng, const std::string& name, Shape shape, double scale) {
  Tensor v = scaled(rng.normal_tensor(shape), scale);
  n.bindings.bind(name, v);
  n.leaves.emplace(name, std::move(v));
  return n.graph.input(name, shape);
}

void finish(Network& n, Rng& rng, Var out) {
  const Tensor readout = rng.normal_tensor(n.graph.shape(out));
  n.graph.mark_output("loss", n.graph.sum(n.graph.mul(out, n.graph.constant(readout))));
}

Network mlp(Rng& rng) {
  Network n;
  n.name = "mlp";
  const std::size_t batch = pick(rng, {1, 2, 3});
  std::size_t width = pick(rng, {2, 4, 6});
  Var h = leaf(n, rng, "x", {batch, width}, 1.0);
  const auto depth = rng.uniform_int(1, 3);
  for (int d = 0; d < depth; ++d) {
    const std::size_t next = pick(rng, {3, 5, 8, 12});
    const std::string p = "l" + std::to_string(d);
    Var w = leaf(n, rng, p + ".w", {next, width}, 1.0 / std::sqrt(double(width)));
    Var b = leaf(n, rng, p + ".b", {next}, 0.1);
    h = n.graph.silu(n.graph.dense(h, w, b));
    n.parameters += next * width + next;
    width = next;
  }
  finish(n, rng, h);
  return n;
}

Network convnet(Rng& rng) {
  Network n;
  n.name = "convnet";
  const std::size_t c0 = pick(rng, {1, 2, 3}), size = pick(rng, {4, 6});
  const std::size_t c1 = pick(rng, {2, 4}), c2 = pick(rng, {2, 4});
  auto& g = n.graph;
  Var x = leaf(n, rng, "x", {1, c0, size, size}, 1.0);
  Var h = g.conv2d(x, leaf(n, rng, "c1.w", {c1, c0, 3, 3}, 0.3), leaf(n, rng, "c1.b", {c1}, 0.1), 1, 1);
  h = g.silu(g.group_norm(h, leaf(n, rng, "n1.gamma", {c1}, 1.0), leaf(n, rng, "n1.beta", {c1}, 0.3), 2));
  Var down = g.conv2d(h, leaf(n, rng, "c2.w", {c2, c1, 3, 3}, 0.3), leaf(n, rng, "c2.b", {c2}, 0.1), 2, 1);
  Var up = g.upsample2x(g.silu(down));
  Var cat = g.concat_channels(up, h);
  Var out = g.conv2d(cat, leaf(n, rng, "c3.w", {c0, c1 + c2, 1, 1}, 0.3), leaf(n, rng, "c3.b", {c0}, 0.1), 1, 0);
  n.parameters = c1 * c0 * 9 + c1 + 2 * c1 + c2 * c1 * 9 + c2 + c0 * (c1 + c2) + c0;
  finish(n, rng, g.add(out, x));
  return n;
}

Network unet(Rng& rng) {
  Network n;
  n.name = "unet";
  UNetConfig cfg;
  cfg.channels = pick(rng, {1, 2, 3});
  cfg.height = cfg.width = pick(rng, {4, 8});
  cfg.widths = {pick(rng, {2, 4}), pick(rng, {4, 6})};
  cfg.res_blocks = 1;
  cfg.time_dim = pick(rng, {4, 8});
  cfg.groups = 2;
  Rng init = rng.fork(1);
  const DenoiserModel model(cfg, default_schedule(), init, "u");
  auto& g = n.graph;
  Var x = leaf(n, rng, "x", {1, cfg.channels, cfg.height, cfg.width}, 1.0);
  Var t = g.constant(Tensor({1}, static_cast<double>(rng.uniform_int(1, 100))));
  for (const auto& [name, value] : model.parameters()) {
    // Perturb the zero-initialised tensors so every path carries gradient.
    Tensor v = add(value, scaled(rng.normal_tensor(value.shape()), 0.1));
    n.bindings.bind(name, v);
    n.leaves.emplace(name, std::move(v));
  }
  n.parameters = model.parameters().count();
  finish(n, rng, model.build(g, x, t));
  return n;
}

Network autoencoder(Rng& rng) {
  Network n;
  n.name = "autoencoder";
  AutoencoderConfig cfg;
  cfg.height = cfg.width = pick(rng, {4, 8});
  cfg.latent_channels = pick(rng, {1, 2});
  cfg.stem_width = pick(rng, {2, 4});
  cfg.widths = {pick(rng, {2, 4})};
  Rng init = rng.fork(2);
  const Autoencoder ae(cfg, init);
  auto& g = n.graph;
  Var x = leaf(n, rng, "x", {1, 3, cfg.height, cfg.width}, 0.5);
  for (const auto& [name, value] : ae.parameters()) {
    Tensor v = add(value, scaled(rng.normal_tensor(value.shape()), 0.1));
    n.bindings.bind(name, v);
    n.leaves.emplace(name, std::move(v));
  }
  n.parameters = ae.parameters().count();
  Var recon = ae.build_decoder(g, ae.build_encoder(g, x));
  g.mark_output("loss", g.mse(recon, x));
  return n;
}

// Errors are normalised by the largest reference gradient in the network:
// some leaves (a bias feeding a norm) have an exactly zero gradient, where a
// per-leaf ratio only measures finite-difference roundoff.
double check(const Network& n) {
  std::set<std::string> wrt;
  for (const auto& [name, v] : n.leaves) wrt.insert(name);
  const GradientResult r = gradient(n.graph, n.bindings, "loss", wrt);
  double diff = 0.0, scale = 0.0;
  for (const auto& [name, value] : n.leaves) {
    auto f = [&](const Tensor& v) {
      Bindings b = n.bindings;
      b.bind(name, v);
      return evaluate(n.graph, b).at("loss").item();
    };
    const Tensor fd = finite_difference_gradient(f, value, 1e-4);
    diff = std::max(diff, max_abs_diff(r.gradients.at(name), fd));
    scale = std::max(scale, max_abs(fd));
  }
  return diff / std::max(scale, 1e-6);
}

}  // namespace

std::vector<GradcheckCase> random_network_gradchecks(std::uint64_t seed, int count) {
  if (count < 1) throw ConfigError("gradcheck: network count must be >= 1");
  std::vector<GradcheckCase> out;
  const Rng base(seed, stream_id("gradcheck"));
  for (int i = 0; i < count; ++i) {
    Rng rng = base.fork(static_cast<std::uint64_t>(i));
    Network n;
    switch (i % 4) {
      case 0: n = mlp(rng); break;
      case 1: n = convnet(rng); break;
      case 2: n = unet(rng); break;
      default: n = autoencoder(rng); break;
    }
    if (n.parameters > 10'000) throw ConfigError("gradcheck: network " + n.name + " exceeds 10^4 parameters");
    out.push_back({n.name + "_" + std::to_string(i), n.parameters, check(n)});
  }
  return out;
}

}  // namespace dadt::cli
