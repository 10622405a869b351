#include "dadt/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dadt/errors.hpp"

namespace dadt {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr std::size_t kWindow = 8;
constexpr std::size_t kStride = 4;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
}

Tensor as_batch(const Tensor& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("expected an image [C,H,W] or batch [B,C,H,W], got " + shape_string(x.shape()));
}

std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + window <= extent; s += kStride) starts.push_back(s);
  return starts;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("feature matrix must be [N, D], got " + shape_string(t.shape()));
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[i * t.dim(1) + j];
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  return (centred.transpose() * centred) / static_cast<double>(x.rows() - 1);
}

/// Symmetric PSD square root with negative eigenvalues clipped at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

Featurizer::Featurizer(Autoencoder encoder) : encoder_(std::move(encoder)) {
  const auto& c = encoder_.config();
  dim_ = c.linear ? c.latent_channels : (c.widths.empty() ? c.stem_width : c.widths.back());
}

std::vector<Tensor> Featurizer::layers(const Tensor& images) const {
  return encoder_.config().linear ? std::vector<Tensor>{encoder_.encode(as_batch(images))}
                                  : encoder_.encoder_activations(as_batch(images));
}

Tensor Featurizer::embed(const Tensor& images) const {
  const auto acts = layers(images);
  const Tensor& deep = acts.back();
  const std::size_t b = deep.dim(0), c = deep.dim(1), hw = deep.dim(2) * deep.dim(3);
  Tensor out({b, c});
  for (std::size_t i = 0; i < b * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += deep[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  return out;
}

double ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  const Tensor x = as_batch(a), y = as_batch(b);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t wh = std::min(kWindow, h), ww = std::min(kWindow, w);
  const auto ys = window_starts(h, wh), xs = window_starts(w, ww);
  const double n = static_cast<double>(wh * ww);
  double total = 0.0;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* pa = x.data().data() + p * h * w;
    const double* pb = y.data().data() + p * h * w;
    double plane_sum = 0.0;
    for (std::size_t y0 : ys)
      for (std::size_t x0 : xs) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < wh; ++i)
          for (std::size_t j = 0; j < ww; ++j) {
            ma += pa[(y0 + i) * w + x0 + j];
            mb += pb[(y0 + i) * w + x0 + j];
          }
        ma /= n;
        mb /= n;
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (std::size_t i = 0; i < wh; ++i)
          for (std::size_t j = 0; j < ww; ++j) {
            const double da = pa[(y0 + i) * w + x0 + j] - ma;
            const double db = pb[(y0 + i) * w + x0 + j] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        va /= n;
        vb /= n;
        cov /= n;
        plane_sum += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
      }
    total += plane_sum / static_cast<double>(ys.size() * xs.size());
  }
  return total / static_cast<double>(planes);
}

double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double frechet_distance(const Tensor& features_a, const Tensor& features_b) {
  const Eigen::MatrixXd fa = to_matrix(features_a), fb = to_matrix(features_b);
  if (fa.cols() != fb.cols()) throw ShapeError("frechet_distance: feature dimensions differ");
  const auto need = static_cast<Eigen::Index>(fa.cols() + 1);
  if (fa.rows() < need || fb.rows() < need)
    throw ConfigError("frechet_distance needs at least " + std::to_string(need) + " samples per set (got " +
                      std::to_string(fa.rows()) + " and " + std::to_string(fb.rows()) + ")");
  const Eigen::RowVectorXd ma = fa.colwise().mean(), mb = fb.colwise().mean();
  const Eigen::MatrixXd sa = covariance(fa, ma), sb = covariance(fb, mb);
  const Eigen::MatrixXd root_a = psd_sqrt(sa);
  const Eigen::MatrixXd inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_covmean = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_covmean;
}

double frechet_feature_distance(std::span<const Tensor> set_a, std::span<const Tensor> set_b, const Featurizer& f) {
  const std::size_t need = f.dim() + 1;
  if (set_a.size() < need || set_b.size() < need)
    throw ConfigError("FID-lite needs at least " + std::to_string(need) + " images per set (got " +
                      std::to_string(set_a.size()) + " and " + std::to_string(set_b.size()) + ")");
  auto features = [&](std::span<const Tensor> set) {
    std::vector<Tensor> batch(set.begin(), set.end());
    for (auto& t : batch) t = as_batch(t);
    return f.embed(stack(batch));
  };
  return frechet_distance(features(set_a), features(set_b));
}

double perceptual_distance(const Tensor& a, const Tensor& b, const Featurizer& f) {
  require_same_shape(a, b, "perceptual_distance");
  double pixel = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) pixel += (a[i] - b[i]) * (a[i] - b[i]);
  double total = pixel / static_cast<double>(a.size());
  const auto la = f.layers(a), lb = f.layers(b);
  for (std::size_t l = 0; l < la.size(); ++l) {
    const Tensor& x = la[l];
    const Tensor& y = lb[l];
    const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    double layer = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        double nx = 0.0, ny = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          nx += x[(n * c + k) * hw + p] * x[(n * c + k) * hw + p];
          ny += y[(n * c + k) * hw + p] * y[(n * c + k) * hw + p];
        }
        nx = std::sqrt(nx) + 1e-10;
        ny = std::sqrt(ny) + 1e-10;
        for (std::size_t k = 0; k < c; ++k) {
          const double d = x[(n * c + k) * hw + p] / nx - y[(n * c + k) * hw + p] / ny;
          layer += d * d;
        }
      }
    total += layer / static_cast<double>(batch * hw);
  }
  return total / static_cast<double>(la.size() + 1);
}

std::optional<double> cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::optional<double> embedding_cosine(const Tensor& a, const Tensor& b, const Featurizer& f) {
  require_same_shape(a, b, "embedding_cosine");
  return cosine_similarity(f.embed(a).data(), f.embed(b).data());
}

MetricValue summarize(std::span<const double> values) {
  MetricValue m;
  m.count = values.size();
  if (values.empty()) return m;
  double sum = 0.0;
  for (double v : values) sum += v;
  m.value = sum / static_cast<double>(values.size());
  if (values.size() > 1 && std::isfinite(m.value)) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.value) * (v - m.value);
    m.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return m;
}

MetricReport evaluate_metrics(std::span<const Tensor> reference, std::span<const Tensor> candidate,
                              const Featurizer& f) {
  if (reference.size() != candidate.size()) throw ShapeError("evaluate_metrics: set sizes differ");
  std::vector<double> s, p, lp, cs;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    s.push_back(ssim(candidate[i], reference[i]));
    p.push_back(psnr(candidate[i], reference[i]));
    lp.push_back(perceptual_distance(candidate[i], reference[i], f));
    if (auto c = embedding_cosine(candidate[i], reference[i], f)) cs.push_back(*c);
  }
  MetricReport r;
  r.ssim = summarize(s);
  r.psnr = summarize(p);
  r.perceptual = summarize(lp);
  r.cosine = summarize(cs);
  r.frechet.value = frechet_feature_distance(reference, candidate, f);
  r.frechet.count = reference.size();
  return r;
}

}  // namespace dadt
