#include "dadt/purify.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dadt/diffusion.hpp"
#include "dadt/errors.hpp"

namespace dadt {

namespace {

constexpr std::array<std::pair<PurifyMethod, std::string_view>, 6> kMethodNames{{
    {PurifyMethod::pdm_pure, "pdm_pure"},
    {PurifyMethod::grid_pure, "grid_pure"},
    {PurifyMethod::ldm_pure, "ldm_pure"},
    {PurifyMethod::jpeg_dct, "jpeg_dct"},
    {PurifyMethod::crop_resize, "crop_resize"},
    {PurifyMethod::highfreq_filter, "highfreq_filter"},
}};

constexpr std::array<int, 64> kLuminance{
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40, 57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95,  98,  112, 100, 103, 99};

/// Splits a tensor into (planes, H, W) for per-channel 2-D processing.
struct Planes {
  std::size_t count, h, w;
};

Planes planes_of(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("image operation needs at least 2 axes, got " + shape_string(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  return {x.size() / (h * w), h, w};
}

Shape with_extent(const Shape& s, std::size_t h, std::size_t w) {
  Shape out = s;
  out[out.size() - 2] = h;
  out[out.size() - 1] = w;
  return out;
}

Tensor as_batch(const Tensor& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("expected an image [C,H,W] or batch [B,C,H,W], got " + shape_string(x.shape()));
}

/// Orthonormal 8-point DCT-II basis: basis[u][x].
std::array<std::array<double, 8>, 8> dct_basis() {
  std::array<std::array<double, 8>, 8> b{};
  for (int u = 0; u < 8; ++u) {
    const double cu = u == 0 ? std::sqrt(0.125) : 0.5;
    for (int x = 0; x < 8; ++x) b[u][x] = cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
  }
  return b;
}

}  // namespace

std::string_view to_string(PurifyMethod method) noexcept {
  for (const auto& [m, name] : kMethodNames)
    if (m == method) return name;
  return "unknown";
}

PurifyMethod parse_purify_method(std::string_view name) {
  for (const auto& [m, n] : kMethodNames)
    if (n == name) return m;
  throw ConfigError("unknown purification method '" + std::string(name) + "'");
}

void validate(const PurifyConfig& c, int steps) {
  switch (c.method) {
    case PurifyMethod::grid_pure:
      if (c.grid_cell < 1) throw ConfigError("grid_pure: cell must be >= 1");
      if (c.grid_window < c.grid_cell || c.grid_window % c.grid_cell)
        throw ConfigError("grid_pure: window must be a positive multiple of the cell size");
      [[fallthrough]];
    case PurifyMethod::pdm_pure:
    case PurifyMethod::ldm_pure:
      if (c.t_star < 0 || c.t_star > steps)
        throw ConfigError("purify t_star " + std::to_string(c.t_star) + " outside [0, " + std::to_string(steps) +
                          "]");
      if (c.method == PurifyMethod::pdm_pure && c.resample_factor < 1)
        throw ConfigError("pdm_pure: resample factor must be >= 1");
      break;
    case PurifyMethod::jpeg_dct:
      if (c.jpeg_quality < 1 || c.jpeg_quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
      break;
    case PurifyMethod::crop_resize:
      if (!(c.crop_fraction > 0.0 && c.crop_fraction < 0.5))
        throw ConfigError("crop fraction must lie in (0, 0.5)");
      break;
    case PurifyMethod::highfreq_filter:
      if (c.filter_radius < 1) throw ConfigError("filter radius must be >= 1");
      if (!(c.filter_eps > 0.0)) throw ConfigError("filter eps must be > 0");
      break;
  }
}

Rng purify_rng(const PurifyConfig& config, std::uint64_t index) {
  return Rng(config.seed, stream_id(streams::kPurify) + index);
}

Tensor area_downsample(const Tensor& x, std::size_t factor) {
  if (factor == 0) throw ConfigError("downsample factor must be >= 1");
  if (factor == 1) return x;
  const auto [n, h, w] = planes_of(x);
  if (h % factor || w % factor)
    throw ConfigError("downsample factor " + std::to_string(factor) + " does not divide " + std::to_string(h) +
                      "x" + std::to_string(w));
  const std::size_t oh = h / factor, ow = w / factor;
  Tensor out(with_extent(x.shape(), oh, ow));
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b) s += x[(p * h + i * factor + a) * w + j * factor + b];
        out[(p * oh + i) * ow + j] = s * inv;
      }
  return out;
}

Tensor bilinear_resize(const Tensor& x, std::size_t height, std::size_t width) {
  const auto [n, h, w] = planes_of(x);
  if (height == 0 || width == 0) throw ConfigError("resize target must be non-empty");
  Tensor out(with_extent(x.shape(), height, width));
  // Half-pixel centres; source coordinates clamped to the valid range.
  auto axis = [](std::size_t dst, std::size_t src_len, std::size_t dst_len) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_len) / static_cast<double>(dst_len) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_len - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, src_len - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t i = 0; i < height; ++i) {
    const auto [y0, y1, fy] = axis(i, h, height);
    for (std::size_t j = 0; j < width; ++j) {
      const auto [x0, x1, fx] = axis(j, w, width);
      for (std::size_t p = 0; p < n; ++p) {
        const double* src = x.data().data() + p * h * w;
        const double top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
        const double bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
        out[(p * height + i) * width + j] = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Tensor pdm_pure(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config) {
  PurifyConfig c = config;
  c.method = PurifyMethod::pdm_pure;
  validate(c, pdm.schedule().steps);
  const Tensor xb = as_batch(x);
  const auto factor = static_cast<std::size_t>(c.resample_factor);
  Rng rng = purify_rng(c);
  Tensor y = sdedit(pdm, area_downsample(xb, factor), c.t_star, pdm.schedule(), rng);
  if (factor > 1) y = bilinear_resize(y, xb.dim(2), xb.dim(3));
  return clamped(y, 0.0, 1.0).reshaped(x.shape());
}

std::vector<GridWindow> grid_windows(std::size_t height, std::size_t width, std::size_t cell, std::size_t window) {
  if (cell == 0 || window == 0 || window % cell) throw ConfigError("grid: window must be a multiple of the cell");
  if (height % cell || width % cell)
    throw ConfigError("grid_pure: image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by cell " + std::to_string(cell));
  if (window > height || window > width) throw ConfigError("grid_pure: window larger than the image");
  if (window % 2) throw ConfigError("grid_pure: window must be even");
  std::vector<GridWindow> out;
  for (std::size_t y = 0; y + window <= height; y += cell)
    for (std::size_t x = 0; x + window <= width; x += cell) out.push_back({y, x, false});
  // The corner window coincides with the full image when window covers it.
  const bool duplicate = window == height && window == width;
  if (!duplicate) out.push_back({0, 0, true});
  return out;
}

GridPureResult grid_pure_detailed(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config) {
  PurifyConfig c = config;
  c.method = PurifyMethod::grid_pure;
  validate(c, pdm.schedule().steps);
  const Tensor xb = as_batch(x);
  if (xb.dim(0) != 1) throw ShapeError("grid_pure purifies one image at a time");
  const std::size_t ch = xb.dim(1), h = xb.dim(2), w = xb.dim(3);
  const auto win = static_cast<std::size_t>(c.grid_window);
  const auto windows = grid_windows(h, w, static_cast<std::size_t>(c.grid_cell), win);
  const std::size_t half = win / 2;

  // Maps window pixel (i, j) to its image position.
  auto source = [&](const GridWindow& gw, std::size_t i, std::size_t j) {
    if (!gw.corners) return std::pair{gw.y + i, gw.x + j};
    const std::size_t yy = i < half ? i : h - win + i;
    const std::size_t xx = j < half ? j : w - win + j;
    return std::pair{yy, xx};
  };

  Tensor sum({ch, h, w}, 0.0);
  std::vector<int> coverage(h * w, 0);
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const GridWindow& gw = windows[k];
    Tensor patch({1, ch, win, win});
    for (std::size_t cc = 0; cc < ch; ++cc)
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          const auto [yy, xx] = source(gw, i, j);
          patch[(cc * win + i) * win + j] = xb[(cc * h + yy) * w + xx];
        }
    Rng rng = purify_rng(c, k);
    const Tensor edited = sdedit(pdm, patch, c.t_star, pdm.schedule(), rng);
    for (std::size_t i = 0; i < win; ++i)
      for (std::size_t j = 0; j < win; ++j) {
        const auto [yy, xx] = source(gw, i, j);
        ++coverage[yy * w + xx];
        for (std::size_t cc = 0; cc < ch; ++cc) sum[(cc * h + yy) * w + xx] += edited[(cc * win + i) * win + j];
      }
  }
  GridPureResult result;
  result.windows = windows.size();
  result.image = Tensor({ch, h, w});
  for (std::size_t cc = 0; cc < ch; ++cc)
    for (std::size_t p = 0; p < h * w; ++p) {
      if (coverage[p] == 0) throw NumericError("grid_pure: pixel not covered by any window");
      result.image[cc * h * w + p] = std::clamp(sum[cc * h * w + p] / coverage[p], 0.0, 1.0);
    }
  result.image = result.image.reshaped(x.shape());
  result.coverage = std::move(coverage);
  return result;
}

Tensor grid_pure(const DenoiserModel& pdm, const Tensor& x, const PurifyConfig& config) {
  return grid_pure_detailed(pdm, x, config).image;
}

Tensor ldm_pure(const LatentDiffusionModel& ldm, const Tensor& x, const PurifyConfig& config) {
  PurifyConfig c = config;
  c.method = PurifyMethod::ldm_pure;
  validate(c, ldm.denoiser.schedule().steps);
  Rng rng = purify_rng(c);
  return ldm_edit(ldm, as_batch(x), c.t_star, rng).reshaped(x.shape());
}

std::array<int, 64> jpeg_quant_table(int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> q{};
  for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLuminance[i] * scale + 50) / 100, 1, 255);
  return q;
}

Tensor jpeg_dct_purify(const Tensor& x, int quality) {
  const auto table = jpeg_quant_table(quality);
  static const auto basis = dct_basis();
  const auto [n, h, w] = planes_of(x);
  const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  Tensor out(x.shape());
  std::vector<double> plane(ph * pw);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        plane[i * pw + j] = x[(p * h + std::min(i, h - 1)) * w + std::min(j, w - 1)] * 255.0 - 128.0;
    for (std::size_t by = 0; by < ph; by += 8)
      for (std::size_t bx = 0; bx < pw; bx += 8) {
        double block[8][8], tmp[8][8], coef[8][8];
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) block[i][j] = plane[(by + i) * pw + bx + j];
        // Rows then columns: coef = B * block * B^T.
        for (int i = 0; i < 8; ++i)
          for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int j = 0; j < 8; ++j) s += basis[v][j] * block[i][j];
            tmp[i][v] = s;
          }
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int i = 0; i < 8; ++i) s += basis[u][i] * tmp[i][v];
            // DC carries only the block mean and is kept exact.
            const double q = table[static_cast<std::size_t>(u * 8 + v)];
            coef[u][v] = (u == 0 && v == 0) ? s : std::round(s / q) * q;
          }
        for (int u = 0; u < 8; ++u)
          for (int j = 0; j < 8; ++j) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += basis[v][j] * coef[u][v];
            tmp[u][j] = s;
          }
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += basis[u][i] * tmp[u][j];
            block[i][j] = s;
          }
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) plane[(by + i) * pw + bx + j] = block[i][j];
      }
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(p * h + i) * w + j] = std::clamp((plane[i * pw + j] + 128.0) / 255.0, 0.0, 1.0);
  }
  return out;
}

std::size_t crop_extent(std::size_t extent, double fraction) {
  const double kept = static_cast<double>(extent) * (1.0 - fraction);
  const auto even = static_cast<std::size_t>(2.0 * std::round(kept / 2.0));
  return std::clamp<std::size_t>(even, 1, extent);
}

Tensor crop_resize(const Tensor& x, double fraction) {
  if (!(fraction >= 0.0 && fraction < 0.5)) throw ConfigError("crop fraction must lie in [0, 0.5)");
  const auto [n, h, w] = planes_of(x);
  const std::size_t ch = crop_extent(h, fraction), cw = crop_extent(w, fraction);
  const std::size_t oy = (h - ch) / 2, ox = (w - cw) / 2;
  Tensor crop(with_extent(x.shape(), ch, cw));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < ch; ++i)
      for (std::size_t j = 0; j < cw; ++j) crop[(p * ch + i) * cw + j] = x[(p * h + oy + i) * w + ox + j];
  return clamped(bilinear_resize(crop, h, w), 0.0, 1.0);
}

Tensor box_filter(const Tensor& x, int radius) {
  if (radius < 0) throw ConfigError("box radius must be >= 0");
  const auto [n, h, w] = planes_of(x);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  Tensor out(x.shape());
  for (std::size_t p = 0; p < n; ++p)
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        double s = 0.0;
        int count = 0;
        for (std::ptrdiff_t a = std::max<std::ptrdiff_t>(0, i - r); a <= std::min(H - 1, i + r); ++a)
          for (std::ptrdiff_t b = std::max<std::ptrdiff_t>(0, j - r); b <= std::min(W - 1, j + r); ++b) {
            s += x[p * h * w + static_cast<std::size_t>(a * W + b)];
            ++count;
          }
        out[p * h * w + static_cast<std::size_t>(i * W + j)] = s / count;
      }
  return out;
}

Tensor highfreq_filter_purify(const Tensor& x, int radius, double eps) {
  if (radius < 1) throw ConfigError("filter radius must be >= 1");
  if (!(eps > 0.0)) throw ConfigError("filter eps must be > 0");
  Tensor sq(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) sq[i] = x[i] * x[i];
  const Tensor mean = box_filter(x, radius);
  const Tensor mean_sq = box_filter(sq, radius);
  Tensor a(x.shape()), b(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double var = std::max(0.0, mean_sq[i] - mean[i] * mean[i]);
    a[i] = var / (var + eps);
    b[i] = mean[i] - a[i] * mean[i];
  }
  const Tensor mean_a = box_filter(a, radius);
  const Tensor mean_b = box_filter(b, radius);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(mean_a[i] * x[i] + mean_b[i], 0.0, 1.0);
  return out;
}

Tensor purify(const PurifyConfig& config, const Tensor& x, const DenoiserModel* pdm,
              const LatentDiffusionModel* ldm) {
  auto need_pdm = [&] {
    if (!pdm) throw ConfigError(std::string(to_string(config.method)) + " needs a pixel diffusion model");
    return pdm;
  };
  switch (config.method) {
    case PurifyMethod::pdm_pure: return pdm_pure(*need_pdm(), x, config);
    case PurifyMethod::grid_pure: return grid_pure(*need_pdm(), x, config);
    case PurifyMethod::ldm_pure:
      if (!ldm) throw ConfigError("ldm_pure needs a latent diffusion model");
      return ldm_pure(*ldm, x, config);
    case PurifyMethod::jpeg_dct: validate(config, 0); return jpeg_dct_purify(x, config.jpeg_quality);
    case PurifyMethod::crop_resize: validate(config, 0); return crop_resize(x, config.crop_fraction);
    case PurifyMethod::highfreq_filter:
      validate(config, 0);
      return highfreq_filter_purify(x, config.filter_radius, config.filter_eps);
  }
  throw ConfigError("unhandled purification method");
}

}  // namespace dadt
