#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dadt/diffusion.hpp"
#include "dadt/models.hpp"
#include "dadt/rng.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

enum class LossKind { semantic_latent, semantic_pixel, textural, mist, sds_plus, sds_minus, ita, end_to_end };

std::string_view to_string(LossKind kind) noexcept;
/// Parses the names printed by to_string; throws ConfigError otherwise.
LossKind parse_loss_kind(std::string_view name);

/// Losses that compare against a target image.
bool needs_target(LossKind kind) noexcept;
/// Targeted losses are minimised; every other kind is maximised.
bool is_descent(LossKind kind) noexcept;

inline constexpr int kMaxEndToEndSteps = 10;

struct AttackConfig {
  double budget = 16.0 / 255.0;  // l_inf radius, pixel units
  double step = 1.0 / 255.0;
  int iterations = 100;
  LossKind loss = LossKind::semantic_latent;
  int mc_samples = 1;
  std::optional<Tensor> target;  // [1, C, H, W] or [C, H, W]
  double mist_weight = 1.0;
  int end_to_end_t_star = 5;
  std::uint64_t seed = 0;
};

/// Checks the numeric domains and that a target is present exactly when the
/// loss uses one. `budget == 0` is accepted (the attack is then a no-op).
void validate(const AttackConfig& config);

/// Scalar value and its gradient with respect to the attacked image.
struct LossValue {
  double value = 0.0;
  Tensor grad;
};

/// MC mean of |eps_theta(q_sample(E(x), t, eps), t) - eps|^2, with t uniform
/// on {1..T} and eps standard normal, drawn fresh for each sample. `ae` null
/// means the pixel-space form (identity encoder). The noise leaf is named
/// "eps" so test stubs can read it back.
LossValue semantic_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                        const Tensor& x, Rng& rng, int mc_samples);
LossValue semantic_loss_latent(const LatentDiffusionModel& ldm, const Tensor& x, Rng& rng, int mc_samples);
LossValue semantic_loss_pixel(const DenoiserModel& pdm, const Tensor& x, Rng& rng, int mc_samples);

/// -|E(x) - E(y)|^2. Never positive.
LossValue textural_loss(const Autoencoder& ae, const Tensor& x, const Tensor& y);

/// lambda * textural + semantic_latent, sharing the rng draws of the
/// semantic part.
LossValue mist_loss(const LatentDiffusionModel& ldm, const Tensor& x, const Tensor& y, double lambda, Rng& rng,
                    int mc_samples);

/// Score-distillation direction: MC mean of sign * w(t) * (eps_theta - eps)
/// pulled back through dz_t/dx without differentiating eps_theta. For pixel
/// models (`ae` null) the pull-back is sqrt(abar_t) * I. `value` holds the
/// MC mean denoising error for logging.
LossValue sds_gradient(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                       const Tensor& x, int sign, Rng& rng, int mc_samples, const LossWeight& weight = {});

/// MC mean of |eps_theta(z_t, t) - z_target|^2.
LossValue ita_loss_to_latent(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                             const Tensor& x, const Tensor& z_target, Rng& rng, int mc_samples);
LossValue ita_loss(const LatentDiffusionModel& ldm, const Tensor& x, const Tensor& y, Rng& rng, int mc_samples);

/// |edit(x) - y|^2 through the unrolled SDEdit chain (latent when `ae` is
/// given, decoded before comparison). t_star is limited to 10 steps.
LossValue end_to_end_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Autoencoder* ae,
                          const Tensor& x, const Tensor& y, int t_star, Rng& rng);

/// Evaluates the attack objective at x. The rng is the attack's MC stream.
using LossProvider = std::function<LossValue(const Tensor& x, Rng& rng)>;

struct AttackModels {
  const DenoiserModel* pdm = nullptr;
  const LatentDiffusionModel* ldm = nullptr;
};

/// Binds the configured loss to models. semantic_pixel needs the PDM; the
/// encoder-based losses need the LDM; sds and end_to_end use the LDM when
/// given, otherwise the PDM.
LossProvider make_loss_provider(const AttackModels& models, const AttackConfig& config);

struct AttackResult {
  Tensor x_adv;
  std::vector<double> losses;  // objective at each iterate before its update
  double linf = 0.0;
  double seconds = 0.0;
  std::vector<std::string> warnings;
};

/// Signed-gradient PGD: ascent (descent for targeted losses), then
/// projection onto the l_inf ball around x0 and clamping to [0, 1].
/// Three or more consecutive all-zero gradients record a warning.
AttackResult pgd_attack(const Tensor& x0, const LossProvider& loss, const AttackConfig& config);

/// Convenience: make_loss_provider + pgd_attack.
AttackResult run_attack(const AttackModels& models, const Tensor& x0, const AttackConfig& config);

/// Black/white checkerboard with squares of period/2 pixels, phase drawn
/// from seed. Shape [C, H, W].
Tensor checkerboard_target(const Shape& image_shape, int period, std::uint64_t seed);

/// Uniform gray image used as the default end-to-end target.
Tensor gray_target(const Shape& image_shape, double level = 0.5);

}  // namespace dadt
