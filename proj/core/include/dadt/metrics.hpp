#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dadt/models.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

/// Frozen encoder used for the distribution and perceptual metrics.
/// Embeddings are the global spatial average of the deepest hidden encoder
/// activation; perceptual layers are all hidden activations.
class Featurizer {
 public:
  explicit Featurizer(Autoencoder encoder);

  /// [B, D] embeddings for images [B, C, H, W] (or one [C, H, W] image).
  Tensor embed(const Tensor& images) const;
  std::vector<Tensor> layers(const Tensor& images) const;
  std::size_t dim() const noexcept { return dim_; }

 private:
  Autoencoder encoder_;
  std::size_t dim_ = 0;
};

/// Mean SSIM over 8x8 windows at stride 4 (smaller images use one window
/// per axis), C1 = 0.01^2, C2 = 0.03^2, averaged over channels and batch.
double ssim(const Tensor& a, const Tensor& b);

/// 10 log10(1 / MSE); +infinity when the images are identical.
double psnr(const Tensor& a, const Tensor& b);

/// Frechet distance between Gaussians fitted to the rows of two [N, D]
/// feature matrices. Each set needs at least D + 1 rows.
double frechet_distance(const Tensor& features_a, const Tensor& features_b);

/// Frechet distance between featurizer embeddings of two image sets.
double frechet_feature_distance(std::span<const Tensor> set_a, std::span<const Tensor> set_b, const Featurizer& f);

/// Mean over layers (raw pixels plus every encoder activation, the latter
/// unit-normalised along channels) of the per-location squared difference.
double perceptual_distance(const Tensor& a, const Tensor& b, const Featurizer& f);

/// Cosine similarity of two vectors; nullopt when either has zero norm.
std::optional<double> cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Cosine similarity of featurizer embeddings.
std::optional<double> embedding_cosine(const Tensor& a, const Tensor& b, const Featurizer& f);

struct MetricValue {
  double value = 0.0;
  std::size_t count = 0;
  double stderr_ = 0.0;  // standard error of the mean; 0 for set-level metrics
};

struct MetricReport {
  MetricValue ssim, psnr, frechet, perceptual, cosine;
};

/// Mean and standard error; non-finite entries propagate into the mean.
MetricValue summarize(std::span<const double> values);

/// Paired metrics of candidate[i] against reference[i], plus the set-level
/// Frechet distance. Zero-feature cosine pairs are skipped in the count.
MetricReport evaluate_metrics(std::span<const Tensor> reference, std::span<const Tensor> candidate,
                              const Featurizer& f);

}  // namespace dadt
