#include "dadt/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dadt/errors.hpp"
#include "dadt/optim.hpp"

namespace dadt {

namespace {

enum class Init { fan_in, zeros, ones };

/// Creates parameters from `rng` when given, otherwise checks that an
/// existing set provides exactly the declared names and shapes.
class Declarer {
 public:
  Declarer(ParameterSet& params, Rng* rng) : params_(params), rng_(rng) {}

  void operator()(const std::string& name, Shape shape, Init init, std::size_t fan_in = 1) {
    declared_.push_back(name);
    if (rng_) {
      switch (init) {
        case Init::fan_in: params_.add(name, fan_in_uniform(shape, fan_in, *rng_)); break;
        case Init::zeros: params_.add(name, Tensor(shape, 0.0)); break;
        case Init::ones: params_.add(name, Tensor(shape, 1.0)); break;
      }
      return;
    }
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (params_.at(name).shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(params_.at(name).shape()) +
                       ", architecture expects " + shape_string(shape));
  }

  void conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    (*this)(name + ".w", {cout, cin, k, k}, Init::fan_in, cin * k * k);
    (*this)(name + ".b", {cout}, Init::zeros);
  }
  void dense(const std::string& name, std::size_t in, std::size_t out) {
    (*this)(name + ".w", {out, in}, Init::fan_in, in);
    (*this)(name + ".b", {out}, Init::zeros);
  }
  void norm(const std::string& name, std::size_t c) {
    (*this)(name + ".gamma", {c}, Init::ones);
    (*this)(name + ".beta", {c}, Init::zeros);
  }

  void finish() const {
    if (rng_) return;
    if (params_.size() != declared_.size()) {
      for (const auto& [name, t] : params_)
        if (std::find(declared_.begin(), declared_.end(), name) == declared_.end())
          throw ConfigError("unexpected parameter '" + name + "'");
    }
  }

 private:
  ParameterSet& params_;
  Rng* rng_;
  std::vector<std::string> declared_;
};

int groups_for(std::size_t channels, int groups) {
  return static_cast<int>(std::gcd(channels, static_cast<std::size_t>(groups)));
}

Var conv(ComputationGraph& g, const ParameterSet& p, Var x, const std::string& name, int stride, int pad) {
  return g.conv2d(x, p.leaf(g, name + ".w"), p.leaf(g, name + ".b"), stride, pad);
}

Var norm_silu(ComputationGraph& g, const ParameterSet& p, Var x, const std::string& name, int groups) {
  const int gr = groups_for(g.shape(x)[1], groups);
  return g.silu(g.group_norm(x, p.leaf(g, name + ".gamma"), p.leaf(g, name + ".beta"), gr));
}

}  // namespace

// ---------------------------------------------------------------------------
// U-Net denoiser

void validate(const UNetConfig& c) {
  if (c.widths.empty()) throw ConfigError("unet: widths must be non-empty");
  if (c.res_blocks < 1) throw ConfigError("unet: res_blocks must be >= 1");
  if (c.time_dim < 2 || c.time_dim % 2) throw ConfigError("unet: time_dim must be even and >= 2");
  if (c.groups < 1) throw ConfigError("unet: groups must be >= 1");
  const std::size_t div = std::size_t{1} << (c.widths.size() - 1);
  if (c.height % div || c.width % div)
    throw ConfigError("unet: spatial extents must be divisible by " + std::to_string(div));
}

DenoiserModel::DenoiserModel(UNetConfig config, NoiseSchedule schedule, Rng& init, std::string prefix)
    : config_(std::move(config)), schedule_(std::move(schedule)), prefix_(std::move(prefix)) {
  validate(config_);
  declare(&init);
}

DenoiserModel::DenoiserModel(UNetConfig config, NoiseSchedule schedule, ParameterSet params, std::string prefix)
    : config_(std::move(config)), schedule_(std::move(schedule)), prefix_(std::move(prefix)),
      params_(std::move(params)) {
  validate(config_);
  declare(nullptr);
}

void DenoiserModel::declare(Rng* init) {
  Declarer d(params_, init);
  const auto& w = config_.widths;
  const std::size_t D = config_.time_dim;
  const std::string& p = prefix_;
  d.dense(p + ".time0", D, D);
  d.dense(p + ".time1", D, D);
  d.conv(p + ".in", config_.channels, w[0], 3);
  auto block = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    d.norm(name + ".norm0", cin);
    d.conv(name + ".conv0", cin, cout, 3);
    d.dense(name + ".temb", D, cout);
    d.norm(name + ".norm1", cout);
    d.conv(name + ".conv1", cout, cout, 3);
    if (cin != cout) d.conv(name + ".skip", cin, cout, 1);
  };
  std::size_t ch = w[0];
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (int r = 0; r < config_.res_blocks; ++r) {
      block(p + ".down" + std::to_string(l) + ".block" + std::to_string(r), ch, w[l]);
      ch = w[l];
    }
    if (l + 1 < w.size()) d.conv(p + ".down" + std::to_string(l) + ".pool", ch, ch, 3);
  }
  for (std::size_t l = w.size() - 1; l-- > 0;) {
    const std::string up = p + ".up" + std::to_string(l);
    d.conv(up + ".conv", ch, w[l], 3);
    ch = 2 * w[l];
    for (int r = 0; r < config_.res_blocks; ++r) {
      block(up + ".block" + std::to_string(r), ch, w[l]);
      ch = w[l];
    }
  }
  d.norm(p + ".out.norm", ch);
  d.conv(p + ".out", ch, config_.channels, 3);
  d.finish();
  if (params_.count() > kMaxDenoiserParameters)
    throw ConfigError("denoiser has " + std::to_string(params_.count()) + " parameters, limit is " +
                      std::to_string(kMaxDenoiserParameters));
}

Var DenoiserModel::res_block(ComputationGraph& g, Var h, Var temb, const std::string& name, std::size_t cin,
                             std::size_t cout, int groups) const {
  auto _ = g.scope(name);
  Var a = conv(g, params_, norm_silu(g, params_, h, name + ".norm0", groups), name + ".conv0", 1, 1);
  Var e = g.dense(temb, params_.leaf(g, name + ".temb.w"), params_.leaf(g, name + ".temb.b"));
  a = g.add_channel_bias(a, e);
  a = conv(g, params_, norm_silu(g, params_, a, name + ".norm1", groups), name + ".conv1", 1, 1);
  Var skip = cin == cout ? h : conv(g, params_, h, name + ".skip", 1, 0);
  return g.add(a, skip);
}

Var DenoiserModel::build(ComputationGraph& g, Var x_t, Var t) const {
  const Shape& xs = g.shape(x_t);
  if (xs.size() != 4 || xs[1] != config_.channels)
    throw ShapeError("denoiser '" + prefix_ + "' expects [B," + std::to_string(config_.channels) +
                     ",H,W] input, got " + shape_string(xs));
  const std::size_t div = std::size_t{1} << (config_.widths.size() - 1);
  if (xs[2] % div || xs[3] % div)
    throw ShapeError("denoiser '" + prefix_ + "' needs extents divisible by " + std::to_string(div) + ", got " +
                     shape_string(xs));
  auto _ = g.scope(prefix_);
  const auto& w = config_.widths;
  const std::string& p = prefix_;
  const int groups = config_.groups;

  Var temb = g.time_embedding(t, config_.time_dim);
  temb = g.dense(temb, params_.leaf(g, p + ".time0.w"), params_.leaf(g, p + ".time0.b"));
  temb = g.dense(g.silu(temb), params_.leaf(g, p + ".time1.w"), params_.leaf(g, p + ".time1.b"));
  Var temb_act = g.silu(temb);

  Var h = conv(g, params_, x_t, p + ".in", 1, 1);
  std::vector<Var> skips;
  std::size_t ch = w[0];
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (int r = 0; r < config_.res_blocks; ++r) {
      h = res_block(g, h, temb_act, p + ".down" + std::to_string(l) + ".block" + std::to_string(r), ch, w[l],
                    groups);
      ch = w[l];
    }
    if (l + 1 < w.size()) {
      skips.push_back(h);
      h = conv(g, params_, h, p + ".down" + std::to_string(l) + ".pool", 2, 1);
    }
  }
  for (std::size_t l = w.size() - 1; l-- > 0;) {
    const std::string up = p + ".up" + std::to_string(l);
    h = conv(g, params_, g.upsample2x(h), up + ".conv", 1, 1);
    h = g.concat_channels(h, skips[l]);
    ch = 2 * w[l];
    for (int r = 0; r < config_.res_blocks; ++r) {
      h = res_block(g, h, temb_act, up + ".block" + std::to_string(r), ch, w[l], groups);
      ch = w[l];
    }
  }
  return conv(g, params_, norm_silu(g, params_, h, p + ".out.norm", groups), p + ".out", 1, 1);
}

// ---------------------------------------------------------------------------
// Autoencoder

void validate(const AutoencoderConfig& c) {
  if (c.channels == 0 || c.latent_channels == 0) throw ConfigError("autoencoder: channel counts must be positive");
  if (!(c.latent_scale > 0.0) || !std::isfinite(c.latent_scale))
    throw ConfigError("autoencoder: latent_scale must be positive");
  if (c.linear) return;
  if (c.stem_width == 0) throw ConfigError("autoencoder: stem_width must be positive");
  if (c.height % c.factor() || c.width % c.factor())
    throw ConfigError("autoencoder: extents must be divisible by the downsampling factor " +
                      std::to_string(c.factor()));
}

Autoencoder::Autoencoder(AutoencoderConfig config, Rng& init) : config_(std::move(config)) {
  validate(config_);
  declare(&init);
}

Autoencoder::Autoencoder(AutoencoderConfig config, ParameterSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  validate(config_);
  declare(nullptr);
}

void Autoencoder::declare(Rng* init) {
  Declarer d(params_, init);
  const auto& c = config_;
  if (c.linear) {
    d.conv("enc.out", c.channels, c.latent_channels, 1);
    d.conv("dec.out", c.latent_channels, c.channels, 1);
    d.finish();
    return;
  }
  d.conv("enc.stem", c.channels, c.stem_width, 3);
  std::size_t ch = c.stem_width;
  for (std::size_t i = 0; i < c.widths.size(); ++i) {
    d.conv("enc.level" + std::to_string(i) + ".down", ch, c.widths[i], 3);
    d.conv("enc.level" + std::to_string(i) + ".conv", c.widths[i], c.widths[i], 3);
    ch = c.widths[i];
  }
  d.conv("enc.out", ch, c.latent_channels, 1);
  d.conv("dec.in", c.latent_channels, ch, 1);
  for (std::size_t i = c.widths.size(); i-- > 0;) {
    const std::size_t next = i == 0 ? c.stem_width : c.widths[i - 1];
    d.conv("dec.level" + std::to_string(i) + ".conv", c.widths[i], c.widths[i], 3);
    d.conv("dec.level" + std::to_string(i) + ".up", c.widths[i], next, 3);
  }
  d.conv("dec.out", c.stem_width, c.channels, 3);
  d.finish();
}

Var Autoencoder::build_encoder(ComputationGraph& g, Var x, std::vector<Var>* taps) const {
  const auto& c = config_;
  const Shape& xs = g.shape(x);
  if (xs.size() != 4 || xs[1] != c.channels || xs[2] != c.height || xs[3] != c.width)
    throw ShapeError("encoder expects [B," + std::to_string(c.channels) + "," + std::to_string(c.height) + "," +
                     std::to_string(c.width) + "], got " + shape_string(xs));
  auto _ = g.scope("enc");
  if (c.linear) return g.scale(conv(g, params_, x, "enc.out", 1, 0), c.latent_scale);
  Var h = g.silu(conv(g, params_, x, "enc.stem", 1, 1));
  if (taps) taps->push_back(h);
  for (std::size_t i = 0; i < c.widths.size(); ++i) {
    h = g.silu(conv(g, params_, h, "enc.level" + std::to_string(i) + ".down", 2, 1));
    h = g.silu(conv(g, params_, h, "enc.level" + std::to_string(i) + ".conv", 1, 1));
    if (taps) taps->push_back(h);
  }
  return g.scale(conv(g, params_, h, "enc.out", 1, 0), c.latent_scale);
}

Var Autoencoder::build_decoder(ComputationGraph& g, Var z) const {
  const auto& c = config_;
  const Shape expected = c.latent_shape();
  const Shape& zs = g.shape(z);
  if (zs.size() != 4 || zs[1] != expected[0] || zs[2] != expected[1] || zs[3] != expected[2])
    throw ShapeError("decoder expects latent [B," + shape_string(expected) + "], got " + shape_string(zs));
  auto _ = g.scope("dec");
  Var h = g.scale(z, 1.0 / c.latent_scale);
  if (c.linear) return conv(g, params_, h, "dec.out", 1, 0);
  h = g.silu(conv(g, params_, h, "dec.in", 1, 0));
  for (std::size_t i = c.widths.size(); i-- > 0;) {
    h = g.silu(conv(g, params_, h, "dec.level" + std::to_string(i) + ".conv", 1, 1));
    h = g.silu(conv(g, params_, g.upsample2x(h), "dec.level" + std::to_string(i) + ".up", 1, 1));
  }
  return conv(g, params_, h, "dec.out", 1, 1);
}

Tensor Autoencoder::encode(const Tensor& x) const {
  ComputationGraph g;
  g.mark_output("z", build_encoder(g, g.input("x", x.shape())));
  Bindings b;
  bind(b);
  b.bind_ref("x", x);
  return evaluate(g, b).at("z");
}

Tensor Autoencoder::decode(const Tensor& z) const {
  ComputationGraph g;
  g.mark_output("x", build_decoder(g, g.input("z", z.shape())));
  Bindings b;
  bind(b);
  b.bind_ref("z", z);
  return evaluate(g, b).at("x");
}

std::vector<Tensor> Autoencoder::encoder_activations(const Tensor& x) const {
  ComputationGraph g;
  std::vector<Var> taps;
  build_encoder(g, g.input("x", x.shape()), &taps);
  for (std::size_t i = 0; i < taps.size(); ++i) g.mark_output("tap" + std::to_string(1000 + i), taps[i]);
  Bindings b;
  bind(b);
  b.bind_ref("x", x);
  auto out = evaluate(g, b);
  std::vector<Tensor> acts;
  for (auto& [name, t] : out) acts.push_back(std::move(t));  // keys sort by depth
  return acts;
}

Autoencoder Autoencoder::identity(std::size_t channels, std::size_t height, std::size_t width) {
  AutoencoderConfig c;
  c.channels = channels;
  c.latent_channels = channels;
  c.height = height;
  c.width = width;
  c.linear = true;
  c.widths.clear();
  ParameterSet p;
  Tensor eye({channels, channels, 1, 1}, 0.0);
  for (std::size_t i = 0; i < channels; ++i) eye[i * channels + i] = 1.0;
  p.add("enc.out.w", eye);
  p.add("enc.out.b", Tensor({channels}, 0.0));
  p.add("dec.out.w", eye);
  p.add("dec.out.b", Tensor({channels}, 0.0));
  return Autoencoder(c, std::move(p));
}

double reconstruction_mae(const Autoencoder& ae, std::span<const Tensor> images) {
  if (images.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& img : images) {
    const Tensor x = img.rank() == 3 ? img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}) : img;
    const Tensor r = clamped(ae.decode(ae.encode(x)), 0.0, 1.0);
    for (std::size_t i = 0; i < r.size(); ++i) total += std::abs(r[i] - x[i]);
    count += r.size();
  }
  return total / static_cast<double>(count);
}

AutoencoderReport train_autoencoder(Autoencoder& ae, std::span<const Tensor> train_set,
                                    std::span<const Tensor> holdout, const AutoencoderTrainOptions& options,
                                    Rng& rng) {
  if (train_set.empty()) throw ConfigError("train_autoencoder: empty dataset");
  AutoencoderReport report;
  // Train with unit scale; the fitted scale is applied afterwards.
  ae.mutable_config().latent_scale = 1.0;
  std::set<std::string> wrt;
  for (const auto& [name, t] : ae.parameters()) wrt.insert(name);
  AdamOptimizer adam({.lr = options.lr, .clip_norm = options.clip_norm});
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch));
      std::vector<Tensor> items;
      for (std::size_t k = start; k < end; ++k) items.push_back(train_set[order[k]]);
      const Tensor x = stack(items);
      ComputationGraph g;
      Var in = g.input("x", x.shape());
      g.mark_output("loss", g.mse(ae.build_decoder(g, ae.build_encoder(g, in)), in));
      Bindings b;
      ae.bind(b);
      b.bind_ref("x", x);
      GradientResult r;
      try {
        r = gradient(g, b, "loss", wrt);
      } catch (const NumericError& e) {
        throw NumericError(std::string("autoencoder training diverged: ") + e.what());
      }
      if (!std::isfinite(r.value())) throw NumericError("autoencoder training diverged (loss not finite)");
      adam.step(ae.mutable_parameters(), r.gradients);
      report.losses.push_back(r.value());
    }
  }
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& img : train_set) {
    const Tensor x = img.rank() == 3 ? img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}) : img;
    const Tensor z = ae.encode(x);
    for (double v : z.data()) sq += v * v;
    n += z.size();
  }
  const double rms = std::sqrt(sq / static_cast<double>(n));
  report.latent_scale = rms > 0.0 ? 1.0 / rms : 1.0;
  ae.mutable_config().latent_scale = report.latent_scale;
  report.holdout_mae = reconstruction_mae(ae, holdout.empty() ? train_set : holdout);
  report.passed = report.holdout_mae <= options.mae_threshold;
  return report;
}

// ---------------------------------------------------------------------------
// LDM and edits

LatentDiffusionModel::LatentDiffusionModel(Autoencoder ae, DenoiserModel den)
    : autoencoder(std::move(ae)), denoiser(std::move(den)) {
  const Shape latent = autoencoder.config().latent_shape();
  const auto& dc = denoiser.config();
  if (latent != Shape{dc.channels, dc.height, dc.width})
    throw ShapeError("latent denoiser input space " + shape_string(dc.sample_shape()) +
                     " does not match autoencoder latent space " + shape_string(latent));
}

Tensor ldm_edit(const LatentDiffusionModel& ldm, const Tensor& x, int t_star, Rng& rng) {
  const Tensor z = ldm.autoencoder.encode(x);
  const Tensor z_edit = sdedit(ldm.denoiser, z, t_star, ldm.denoiser.schedule(), rng);
  return clamped(ldm.autoencoder.decode(z_edit), 0.0, 1.0);
}

Tensor ldm_edit(const LatentDiffusionModel& ldm, const Tensor& x, const EditConfig& config) {
  Rng rng = edit_rng(config);
  return ldm_edit(ldm, x, config.t_star, rng);
}

Tensor pixel_edit(const DenoiserModel& pdm, const Tensor& x, int t_star, Rng& rng) {
  return clamped(sdedit(pdm, x, t_star, pdm.schedule(), rng), 0.0, 1.0);
}

double norm_of(const Tensor& t, AmplificationNorm norm) {
  double sq = 0.0;
  for (double v : t.data()) sq += v * v;
  return norm == AmplificationNorm::rms ? std::sqrt(sq / static_cast<double>(t.size())) : std::sqrt(sq);
}

double latent_amplification(const Autoencoder& ae, const Tensor& x, const Tensor& x_adv, AmplificationNorm norm) {
  if (x.shape() != x_adv.shape()) throw ShapeError("latent_amplification: shape mismatch");
  const double dx = norm_of(sub(x_adv, x), norm);
  const double dz = norm_of(sub(ae.encode(x_adv), ae.encode(x)), norm);
  if (dx == 0.0) return dz == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return dz / dx;
}

}  // namespace dadt
