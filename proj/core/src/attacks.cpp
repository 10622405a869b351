#include "dadt/attacks.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>

#include "dadt/errors.hpp"

namespace dadt {

namespace {

constexpr std::array<std::pair<LossKind, std::string_view>, 8> kLossNames{{
    {LossKind::semantic_latent, "semantic_latent"},
    {LossKind::semantic_pixel, "semantic_pixel"},
    {LossKind::textural, "textural"},
    {LossKind::mist, "mist"},
    {LossKind::sds_plus, "sds_plus"},
    {LossKind::sds_minus, "sds_minus"},
    {LossKind::ita, "ita"},
    {LossKind::end_to_end, "end_to_end"},
}};

Tensor as_batch(const Tensor& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("expected an image [C,H,W] or batch [B,C,H,W], got " + shape_string(x.shape()));
}

/// Repeats a [1, ...] target along the batch axis when needed.
Tensor broadcast_target(const Tensor& y, const Shape& shape, const char* what) {
  Tensor yb = y.rank() + 1 == shape.size() ? y.reshaped([&] {
    Shape s{1};
    s.insert(s.end(), y.shape().begin(), y.shape().end());
    return s;
  }())
                                           : y;
  if (yb.shape() == shape) return yb;
  if (yb.dim(0) == 1 && Shape(yb.shape().begin() + 1, yb.shape().end()) == Shape(shape.begin() + 1, shape.end())) {
    std::vector<Tensor> copies(shape[0], yb);
    return stack(copies);
  }
  throw ShapeError(std::string(what) + " shape " + shape_string(y.shape()) + " does not match " + shape_string(shape));
}

struct StepDraw {
  Tensor t, signal, noise;
};

StepDraw draw_steps(std::size_t batch, const NoiseSchedule& schedule, Rng& rng) {
  StepDraw d{Tensor({batch}), Tensor({batch}), Tensor({batch})};
  for (std::size_t i = 0; i < batch; ++i) {
    const int t = static_cast<int>(rng.uniform_int(1, schedule.steps));
    d.t[i] = t;
    d.signal[i] = std::sqrt(schedule.alpha_bar(t));
    d.noise[i] = std::sqrt(1.0 - schedule.alpha_bar(t));
  }
  return d;
}

void accumulate(LossValue& acc, const GradientResult& r, const Shape& x_shape) {
  acc.value += r.value();
  const Tensor& g = r.gradients.at("x");
  if (acc.grad.empty()) acc.grad = Tensor(x_shape);
  for (std::size_t i = 0; i < g.size(); ++i) acc.grad[i] += g[i];
}

void finish_mean(LossValue& acc, int mc_samples, const Shape& out_shape) {
  const double inv = 1.0 / static_cast<double>(mc_samples);
  acc.value *= inv;
  for (auto& v : acc.grad.storage()) v *= inv;
  acc.grad = acc.grad.reshaped(out_shape);
}

void check_mc(int mc_samples) {
  if (mc_samples < 1) throw ConfigError("mc_samples must be >= 1, got " + std::to_string(mc_samples));
}

/// |eps_theta(z_t, t) - target|^2 averaged over MC draws; target is the drawn
/// noise when `fixed_target` is null.
LossValue denoising_error(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                          const Tensor& x, const Tensor* fixed_target, Rng& rng, int mc_samples) {
  check_mc(mc_samples);
  const Tensor xb = as_batch(x);
  const std::size_t batch = xb.dim(0);
  LossValue acc;
  for (int m = 0; m < mc_samples; ++m) {
    ComputationGraph g;
    Var xv = g.input("x", xb.shape());
    Var z = ae ? ae->build_encoder(g, xv) : xv;
    const Shape z_shape = g.shape(z);
    StepDraw d = draw_steps(batch, schedule, rng);
    Tensor eps = rng.normal_tensor(z_shape);

    Var e = g.input("eps", z_shape);
    Var zt = g.add(g.mul_per_sample(z, g.input("coef_signal", {batch})),
                   g.mul_per_sample(e, g.input("coef_noise", {batch})));
    Var pred = denoiser.build(g, zt, g.input("t", {batch}));
    Var target = fixed_target ? g.constant(broadcast_target(*fixed_target, z_shape, "latent target"), "target") : e;
    g.mark_output("loss", g.squared_distance(pred, target));

    Bindings b;
    denoiser.bind(b);
    if (ae) ae->bind(b);
    b.bind_ref("x", xb);
    b.bind("eps", std::move(eps));
    b.bind("coef_signal", std::move(d.signal));
    b.bind("coef_noise", std::move(d.noise));
    b.bind("t", std::move(d.t));
    accumulate(acc, gradient(g, b, "loss", {"x"}), xb.shape());
  }
  finish_mean(acc, mc_samples, x.shape());
  return acc;
}

}  // namespace

std::string_view to_string(LossKind kind) noexcept {
  for (const auto& [k, name] : kLossNames)
    if (k == kind) return name;
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  for (const auto& [k, n] : kLossNames)
    if (n == name) return k;
  throw ConfigError("unknown attack loss '" + std::string(name) + "'");
}

bool needs_target(LossKind kind) noexcept {
  return kind == LossKind::textural || kind == LossKind::mist || kind == LossKind::ita ||
         kind == LossKind::end_to_end;
}

bool is_descent(LossKind kind) noexcept { return kind == LossKind::ita || kind == LossKind::end_to_end; }

void validate(const AttackConfig& c) {
  if (!(c.budget >= 0.0) || c.budget > 1.0) throw ConfigError("attack budget must lie in [0, 1]");
  if (c.budget > 0.0 && !(c.step > 0.0 && c.step <= c.budget))
    throw ConfigError("attack step must satisfy 0 < step <= budget");
  if (c.iterations < 1) throw ConfigError("attack iterations must be >= 1");
  check_mc(c.mc_samples);
  if (!(c.mist_weight >= 0.0)) throw ConfigError("mist weight must be >= 0");
  if (c.end_to_end_t_star < 0 || c.end_to_end_t_star > kMaxEndToEndSteps)
    throw ConfigError("end_to_end t_star must lie in [0, " + std::to_string(kMaxEndToEndSteps) + "]");
  if (needs_target(c.loss) && !c.target)
    throw ConfigError("attack loss '" + std::string(to_string(c.loss)) + "' requires a target image");
  if (!needs_target(c.loss) && c.target)
    throw ConfigError("attack loss '" + std::string(to_string(c.loss)) + "' does not take a target image");
}

LossValue semantic_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                        const Tensor& x, Rng& rng, int mc_samples) {
  return denoising_error(denoiser, schedule, ae, x, nullptr, rng, mc_samples);
}

LossValue semantic_loss_latent(const LatentDiffusionModel& ldm, const Tensor& x, Rng& rng, int mc_samples) {
  return semantic_loss(ldm.denoiser, ldm.denoiser.schedule(), &ldm.autoencoder, x, rng, mc_samples);
}

LossValue semantic_loss_pixel(const DenoiserModel& pdm, const Tensor& x, Rng& rng, int mc_samples) {
  return semantic_loss(pdm, pdm.schedule(), nullptr, x, rng, mc_samples);
}

LossValue textural_loss(const Autoencoder& ae, const Tensor& x, const Tensor& y) {
  const Tensor xb = as_batch(x);
  const Tensor z_target = ae.encode(broadcast_target(y, xb.shape(), "textural target"));
  ComputationGraph g;
  Var z = ae.build_encoder(g, g.input("x", xb.shape()));
  g.mark_output("loss", g.scale(g.squared_distance(z, g.constant(z_target, "target")), -1.0));
  Bindings b;
  ae.bind(b);
  b.bind_ref("x", xb);
  LossValue out;
  accumulate(out, gradient(g, b, "loss", {"x"}), xb.shape());
  finish_mean(out, 1, x.shape());
  return out;
}

LossValue mist_loss(const LatentDiffusionModel& ldm, const Tensor& x, const Tensor& y, double lambda, Rng& rng,
                    int mc_samples) {
  if (!(lambda >= 0.0)) throw ConfigError("mist weight must be >= 0");
  LossValue out = semantic_loss_latent(ldm, x, rng, mc_samples);
  const LossValue tex = textural_loss(ldm.autoencoder, x, y);
  out.value += lambda * tex.value;
  for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += lambda * tex.grad[i];
  return out;
}

LossValue sds_gradient(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                       const Tensor& x, int sign, Rng& rng, int mc_samples, const LossWeight& weight) {
  if (sign != 1 && sign != -1) throw ConfigError("sds sign must be +1 or -1");
  check_mc(mc_samples);
  const Tensor xb = as_batch(x);
  const std::size_t batch = xb.dim(0);
  const Tensor z = ae ? ae->encode(xb) : xb;
  const std::size_t per = z.size() / batch;
  LossValue acc;
  acc.grad = Tensor(xb.shape());
  for (int m = 0; m < mc_samples; ++m) {
    StepDraw d = draw_steps(batch, schedule, rng);
    const Tensor eps = rng.normal_tensor(z.shape());
    Tensor zt(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) zt[i] = d.signal[i / per] * z[i] + d.noise[i / per] * eps[i];
    std::vector<int> steps(batch);
    for (std::size_t i = 0; i < batch; ++i) steps[i] = static_cast<int>(d.t[i]);
    const Tensor pred = denoiser.predict(zt, steps);
    // Cotangent on z: sign * w(t) * (eps_theta - eps) * dz_t/dz.
    Tensor cot(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const std::size_t s = i / per;
      const double w = weight ? weight(steps[s]) : 1.0;
      const double r = pred[i] - eps[i];
      acc.value += r * r;
      cot[i] = sign * w * r * d.signal[s];
    }
    if (!ae) {
      for (std::size_t i = 0; i < cot.size(); ++i) acc.grad[i] += cot[i];
      continue;
    }
    ComputationGraph g;
    Var zv = ae->build_encoder(g, g.input("x", xb.shape()));
    g.mark_output("pullback", g.sum(g.mul(zv, g.constant(std::move(cot), "cotangent"))));
    Bindings b;
    ae->bind(b);
    b.bind_ref("x", xb);
    const Tensor gx = gradient(g, b, "pullback", {"x"}).gradients.at("x");
    for (std::size_t i = 0; i < gx.size(); ++i) acc.grad[i] += gx[i];
  }
  finish_mean(acc, mc_samples, x.shape());
  return acc;
}

LossValue ita_loss_to_latent(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                             const Tensor& x, const Tensor& z_target, Rng& rng, int mc_samples) {
  return denoising_error(denoiser, schedule, ae, x, &z_target, rng, mc_samples);
}

LossValue ita_loss(const LatentDiffusionModel& ldm, const Tensor& x, const Tensor& y, Rng& rng, int mc_samples) {
  const Tensor z_target = ldm.autoencoder.encode(as_batch(y));
  return ita_loss_to_latent(ldm.denoiser, ldm.denoiser.schedule(), &ldm.autoencoder, x, z_target, rng, mc_samples);
}

LossValue end_to_end_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                          const Tensor& x, const Tensor& y, int t_star, Rng& rng) {
  if (t_star < 0 || t_star > kMaxEndToEndSteps)
    throw ConfigError("end_to_end t_star " + std::to_string(t_star) + " outside [0, " +
                      std::to_string(kMaxEndToEndSteps) + "]");
  const Tensor xb = as_batch(x);
  ComputationGraph g;
  Var xv = g.input("x", xb.shape());
  Var z = ae ? ae->build_encoder(g, xv) : xv;
  Var edited = build_sdedit_chain(g, denoiser, z, t_star, schedule, rng);
  Var out = ae ? ae->build_decoder(g, edited) : edited;
  const Tensor yb = broadcast_target(y, g.shape(out), "end_to_end target");
  g.mark_output("loss", g.squared_distance(out, g.constant(yb, "target")));
  Bindings b;
  denoiser.bind(b);
  if (ae) ae->bind(b);
  b.bind_ref("x", xb);
  LossValue acc;
  accumulate(acc, gradient(g, b, "loss", {"x"}), xb.shape());
  finish_mean(acc, 1, x.shape());
  return acc;
}

LossProvider make_loss_provider(const AttackModels& models, const AttackConfig& config) {
  validate(config);
  const LossKind kind = config.loss;
  const bool latent_only = kind == LossKind::semantic_latent || kind == LossKind::textural ||
                           kind == LossKind::mist || kind == LossKind::ita;
  if (latent_only && !models.ldm)
    throw ConfigError("attack loss '" + std::string(to_string(kind)) + "' needs a latent diffusion model");
  if (kind == LossKind::semantic_pixel && !models.pdm)
    throw ConfigError("attack loss 'semantic_pixel' needs a pixel diffusion model");
  if (!models.ldm && !models.pdm) throw ConfigError("attack needs at least one model");

  const LatentDiffusionModel* ldm = models.ldm;
  const DenoiserModel* pdm = models.pdm;
  const int mc = config.mc_samples;
  const Tensor target = config.target ? *config.target : Tensor();
  // Generic denoiser access for the kinds that accept either model.
  const NoisePredictor* den = ldm ? static_cast<const NoisePredictor*>(&ldm->denoiser) : pdm;
  const NoiseSchedule* sched = ldm ? &ldm->denoiser.schedule() : &pdm->schedule();
  const Autoencoder* ae = ldm ? &ldm->autoencoder : nullptr;

  switch (kind) {
    case LossKind::semantic_latent:
      return [ldm, mc](const Tensor& x, Rng& rng) { return semantic_loss_latent(*ldm, x, rng, mc); };
    case LossKind::semantic_pixel:
      return [pdm, mc](const Tensor& x, Rng& rng) { return semantic_loss_pixel(*pdm, x, rng, mc); };
    case LossKind::textural:
      return [ldm, target](const Tensor& x, Rng&) { return textural_loss(ldm->autoencoder, x, target); };
    case LossKind::mist:
      return [ldm, target, mc, lambda = config.mist_weight](const Tensor& x, Rng& rng) {
        return mist_loss(*ldm, x, target, lambda, rng, mc);
      };
    case LossKind::sds_plus:
    case LossKind::sds_minus: {
      const int sign = kind == LossKind::sds_plus ? 1 : -1;
      return [den, sched, ae, sign, mc](const Tensor& x, Rng& rng) {
        return sds_gradient(*den, *sched, ae, x, sign, rng, mc);
      };
    }
    case LossKind::ita:
      return [ldm, target, mc](const Tensor& x, Rng& rng) { return ita_loss(*ldm, x, target, rng, mc); };
    case LossKind::end_to_end:
      return [den, sched, ae, target, t = config.end_to_end_t_star](const Tensor& x, Rng& rng) {
        return end_to_end_loss(*den, *sched, ae, x, target, t, rng);
      };
  }
  throw ConfigError("unhandled attack loss");
}

AttackResult pgd_attack(const Tensor& x0, const LossProvider& loss, const AttackConfig& config) {
  validate(config);
  for (double v : x0.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("pgd_attack: clean image must lie in [0, 1]");
  const auto start = std::chrono::steady_clock::now();
  AttackResult result;
  result.x_adv = x0;
  Tensor& x = result.x_adv;
  Rng rng(config.seed, stream_id(streams::kAttack));
  const double direction = is_descent(config.loss) ? -1.0 : 1.0;
  const double delta = config.budget, eta = config.step;
  int zero_run = 0;
  bool warned = false;
  result.losses.reserve(static_cast<std::size_t>(config.iterations));
  for (int k = 0; k < config.iterations; ++k) {
    const LossValue lv = loss(x, rng);
    if (lv.grad.shape() != x.shape())
      throw ShapeError("attack gradient shape " + shape_string(lv.grad.shape()) + " != image shape " +
                       shape_string(x.shape()));
    result.losses.push_back(lv.value);
    bool all_zero = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = lv.grad[i];
      const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
      if (s != 0.0) all_zero = false;
      double v = x[i] + direction * eta * s;
      v = std::clamp(v, x0[i] - delta, x0[i] + delta);
      x[i] = std::clamp(v, 0.0, 1.0);
    }
    zero_run = all_zero ? zero_run + 1 : 0;
    if (zero_run >= 3 && !warned) {
      result.warnings.push_back("zero gradient for 3 consecutive steps at iteration " + std::to_string(k) +
                                "; attack continues");
      warned = true;
    }
  }
  result.linf = max_abs_diff(x, x0);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

AttackResult run_attack(const AttackModels& models, const Tensor& x0, const AttackConfig& config) {
  return pgd_attack(x0, make_loss_provider(models, config), config);
}

Tensor checkerboard_target(const Shape& image_shape, int period, std::uint64_t seed) {
  if (image_shape.size() != 3) throw ShapeError("checkerboard_target expects [C,H,W]");
  if (period < 2 || period % 2) throw ConfigError("checkerboard period must be even and >= 2");
  Rng rng(seed, stream_id("target"));
  const auto px = static_cast<std::size_t>(rng.uniform_int(0, period - 1));
  const auto py = static_cast<std::size_t>(rng.uniform_int(0, period - 1));
  const std::size_t half = static_cast<std::size_t>(period / 2);
  Tensor out(image_shape);
  const std::size_t h = image_shape[1], w = image_shape[2];
  for (std::size_t c = 0; c < image_shape[0]; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(c * h + y) * w + xx] = (((y + py) / half + (xx + px) / half) % 2) ? 1.0 : 0.0;
  return out;
}

Tensor gray_target(const Shape& image_shape, double level) { return Tensor(image_shape, level); }

}  // namespace dadt
