#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "dadt/models.hpp"
#include "dadt/rng.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

enum class PurifyMethod { pdm_pure, grid_pure, ldm_pure, jpeg_dct, crop_resize, highfreq_filter };

std::string_view to_string(PurifyMethod method) noexcept;
PurifyMethod parse_purify_method(std::string_view name);

struct PurifyConfig {
  PurifyMethod method = PurifyMethod::pdm_pure;
  int t_star = 10;
  int grid_cell = 8;
  int grid_window = 16;
  int jpeg_quality = 65;
  double crop_fraction = 0.2;
  int resample_factor = 1;  // pdm_pure: area-downsample by this factor before editing
  int filter_radius = 2;
  double filter_eps = 0.01;
  std::uint64_t seed = 0;
};

/// Domain checks for the fields the configured method uses. `steps` is the
/// diffusion length T of the model that will run the edit.
void validate(const PurifyConfig& config, int steps);

/// Rng for window `index` of a diffusion purifier. Window 0 is also the
/// stream used by pdm_pure and ldm_pure.
Rng purify_rng(const PurifyConfig& config, std::uint64_t index = 0);

/// Optional area downsample, pixel-space SDEdit at t_star, bilinear upsample
/// back, clamp to [0, 1]. Accepts [C,H,W] or [B,C,H,W].
Tensor pdm_pure(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config);

struct GridWindow {
  std::size_t y = 0, x = 0;  // top-left corner; unused for the corner window
  bool corners = false;      // assembled from the four corner blocks of the image
};

/// Windows of side `window` at stride `cell`, followed by the four-corner
/// window unless it would duplicate an existing one.
std::vector<GridWindow> grid_windows(std::size_t height, std::size_t width, std::size_t cell, std::size_t window);

struct GridPureResult {
  Tensor image;
  std::size_t windows = 0;
  std::vector<int> coverage;  // per pixel (H*W), windows covering it
};

/// Patch-wise pixel SDEdit; each pixel is the unweighted mean of the purified
/// windows that cover it. Window k edits with purify_rng(config, k).
GridPureResult grid_pure_detailed(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config);
Tensor grid_pure(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config);

/// encode, latent SDEdit at t_star, decode, clamp.
Tensor ldm_pure(const LatentDiffusionModel& ldm, const Tensor& x, const PurifyConfig& config);

/// libjpeg-scaled luminance quantization table, row-major 8x8.
std::array<int, 64> jpeg_quant_table(int quality);

/// 8x8 block DCT quantize/dequantize per channel with edge-replicated padding.
/// AC coefficients are quantized; the DC term passes through unchanged.
Tensor jpeg_dct_purify(const Tensor& x, int quality);

/// Central crop keeping (1 - fraction) of each extent (rounded to the nearest
/// even size), bilinearly resized back. Fraction 0 is the identity.
Tensor crop_resize(const Tensor& x, double fraction);
std::size_t crop_extent(std::size_t extent, double fraction);

/// Self-guided filter with box radius `radius` and regularisation `eps`,
/// clamped to [0, 1].
Tensor highfreq_filter_purify(const Tensor& x, int radius, double eps);

/// Mean over the (2r+1)^2 window clipped to the image, per channel.
Tensor box_filter(const Tensor& x, int radius);

/// Resampling helpers over [..., H, W] tensors.
Tensor area_downsample(const Tensor& x, std::size_t factor);
Tensor bilinear_resize(const Tensor& x, std::size_t height, std::size_t width);

/// Dispatches on config.method. Diffusion methods need the matching model.
Tensor purify(const PurifyConfig& config, const Tensor& x, const DenoiserModel* pdm,
              const LatentDiffusionModel* ldm);

}  // namespace dadt
