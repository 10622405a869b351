#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dadt/diffusion.hpp"
#include "dadt/graph.hpp"
#include "dadt/parameters.hpp"
#include "dadt/rng.hpp"

namespace dadt {

inline constexpr std::size_t kMaxDenoiserParameters = 500'000;

/// Small U-Net: one resolution per entry of `widths`, `res_blocks` residual
/// blocks per level, sinusoidal time embedding projected into every block.
struct UNetConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> widths{32, 64};
  int res_blocks = 2;
  std::size_t time_dim = 64;
  int groups = 8;

  Shape sample_shape() const { return {channels, height, width}; }
};

void validate(const UNetConfig& config);

/// eps_theta over an arbitrary (C, H, W) input space. The pixel-space PDM and
/// the LDM's latent denoiser are two instances of this class.
class DenoiserModel : public NoisePredictor {
 public:
  DenoiserModel(UNetConfig config, NoiseSchedule schedule, Rng& init, std::string prefix = "den");
  /// Wraps existing parameters (checkpoint load); names are validated.
  DenoiserModel(UNetConfig config, NoiseSchedule schedule, ParameterSet params, std::string prefix = "den");

  Var build(ComputationGraph& g, Var x_t, Var t) const override;
  void bind(Bindings& b) const override { params_.bind(b); }
  ParameterSet* mutable_parameters() override { return &params_; }

  const ParameterSet& parameters() const noexcept { return params_; }
  const UNetConfig& config() const noexcept { return config_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const std::string& prefix() const noexcept { return prefix_; }

 private:
  void declare(Rng* init);
  Var res_block(ComputationGraph& g, Var h, Var temb, const std::string& name, std::size_t cin,
                std::size_t cout, int groups) const;

  UNetConfig config_;
  NoiseSchedule schedule_;
  std::string prefix_;
  ParameterSet params_;
};

/// Plain convolutional autoencoder. Each entry of `widths` adds a stride-2
/// stage, so the downsampling factor is 2^widths.size(). With `linear` set the
/// encoder and decoder are single 1x1 convolutions (factor 1).
struct AutoencoderConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t latent_channels = 4;
  std::size_t stem_width = 32;
  std::vector<std::size_t> widths{32, 64};
  bool linear = false;
  /// Multiplies encoder outputs so latents have roughly unit variance.
  double latent_scale = 1.0;

  std::size_t factor() const { return linear ? 1 : (std::size_t{1} << widths.size()); }
  Shape image_shape() const { return {channels, height, width}; }
  Shape latent_shape() const { return {latent_channels, height / factor(), width / factor()}; }
};

void validate(const AutoencoderConfig& config);

class Autoencoder {
 public:
  Autoencoder(AutoencoderConfig config, Rng& init);
  Autoencoder(AutoencoderConfig config, ParameterSet params);

  /// Encoder graph. `taps`, when given, receives every hidden activation
  /// (after its nonlinearity) in order of depth.
  Var build_encoder(ComputationGraph& g, Var x, std::vector<Var>* taps = nullptr) const;
  Var build_decoder(ComputationGraph& g, Var z) const;
  void bind(Bindings& b) const { params_.bind(b); }

  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& z) const;
  /// Hidden activations of the encoder for x, shallowest first.
  std::vector<Tensor> encoder_activations(const Tensor& x) const;

  const AutoencoderConfig& config() const noexcept { return config_; }
  AutoencoderConfig& mutable_config() noexcept { return config_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  ParameterSet& mutable_parameters() noexcept { return params_; }

  /// 1x1 encoder/decoder with identity weights (channels == latent channels).
  static Autoencoder identity(std::size_t channels, std::size_t height, std::size_t width);

 private:
  void declare(Rng* init);

  AutoencoderConfig config_;
  ParameterSet params_;
};

struct AutoencoderTrainOptions {
  int epochs = 30;
  int batch = 16;
  double lr = 2e-3;
  double clip_norm = 1.0;
  double mae_threshold = 0.05;
};

struct AutoencoderReport {
  std::vector<double> losses;
  double holdout_mae = 0.0;
  double latent_scale = 1.0;
  bool passed = false;  // holdout MAE within threshold
};

/// Minimises per-pixel MSE, then fits latent_scale to unit latent variance
/// over the training set and measures held-out reconstruction MAE.
AutoencoderReport train_autoencoder(Autoencoder& ae, std::span<const Tensor> train_set,
                                    std::span<const Tensor> holdout, const AutoencoderTrainOptions& options,
                                    Rng& rng);

double reconstruction_mae(const Autoencoder& ae, std::span<const Tensor> images);

/// Autoencoder plus a denoiser over its latent space.
struct LatentDiffusionModel {
  Autoencoder autoencoder;
  DenoiserModel denoiser;

  LatentDiffusionModel(Autoencoder ae, DenoiserModel den);
};

/// decode(sdedit(encode(x))), clamped to [0, 1].
Tensor ldm_edit(const LatentDiffusionModel& ldm, const Tensor& x, int t_star, Rng& rng);
Tensor ldm_edit(const LatentDiffusionModel& ldm, const Tensor& x, const EditConfig& config);

/// Pixel-space SDEdit followed by the final clamp to [0, 1].
Tensor pixel_edit(const DenoiserModel& pdm, const Tensor& x, int t_star, Rng& rng);

enum class AmplificationNorm { rms, l2 };

/// |E(x_adv) - E(x)| / |x_adv - x|. Infinity when only the latent moved, 0
/// when neither did.
double latent_amplification(const Autoencoder& ae, const Tensor& x, const Tensor& x_adv,
                            AmplificationNorm norm = AmplificationNorm::rms);

double norm_of(const Tensor& t, AmplificationNorm norm);

}  // namespace dadt
