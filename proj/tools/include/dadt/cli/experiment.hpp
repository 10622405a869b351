#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dadt/attacks.hpp"
#include "dadt/cli/config.hpp"
#include "dadt/metrics.hpp"
#include "dadt/models.hpp"
#include "dadt/purify.hpp"

namespace dadt::cli {

/// Runs fn(0) .. fn(n - 1) on up to `workers` threads. Results must be
/// written by index; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// Images are stored as [3, H, W]; files are img_0000.ppm, img_0001.ppm, ...
std::vector<Tensor> load_image_dir(const std::filesystem::path& dir);
void save_image_set(std::span<const Tensor> images, const std::filesystem::path& dir);
std::string image_name(std::size_t index);

SyntheticSpec training_spec(const ExperimentConfig& c);
SyntheticSpec holdout_spec(const ExperimentConfig& c);
SyntheticSpec eval_spec(const ExperimentConfig& c);

/// Loaded models. Which ones are present depends on what the command needs.
struct ModelBundle {
  std::optional<DenoiserModel> pdm;
  std::optional<LatentDiffusionModel> ldm;

  const DenoiserModel& need_pdm() const;
  const LatentDiffusionModel& need_ldm() const;
  Featurizer featurizer() const;
};

/// Fails before any compute when a required checkpoint is missing.
void require_checkpoints(const ExperimentConfig& c, bool pdm, bool ldm);
ModelBundle load_models(const ExperimentConfig& c, bool pdm, bool ldm);

/// Target image for item `index` of a targeted attack.
std::optional<Tensor> attack_target(const AttackSection& a, LossKind loss, const Shape& image_shape,
                                    std::uint64_t seed, std::size_t index);

struct SetAttack {
  LossKind loss = LossKind::semantic_latent;
  double budget = 16.0 / 255.0;
  std::uint64_t seed = 0;
};

/// PGD over every image with per-item seeds item_seed(seed, "attack", i).
/// Throws NumericError if any result leaves the l_inf ball or [0, 1].
std::vector<AttackResult> attack_set(const ModelBundle& models, std::span<const Tensor> images,
                                     const AttackSection& section, const SetAttack& what, int workers);

/// SDEdit of every image; item i uses item_seed(seed, "edit:" + label, i).
std::vector<Tensor> edit_set(const ModelBundle& models, ModelChoice model, std::span<const Tensor> images,
                             int t_star, std::uint64_t seed, const std::string& label, int workers);

/// Item i uses PurifyConfig::seed = item_seed(seed, "purify:" + label, i).
std::vector<Tensor> purify_set(const ModelBundle& models, std::span<const Tensor> images, PurifyConfig config,
                               std::uint64_t seed, const std::string& label, int workers);

struct PairedTest {
  std::size_t n = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  double t = 0.0;
  double p_value = 1.0;  // two-sided
};

/// Student t test of the mean of paired differences against zero.
PairedTest paired_t_test(std::span<const double> differences);

struct Histogram {
  std::vector<double> edges;  // bins + 1 increasing edges
  std::vector<std::size_t> counts;
};

/// Equal-width bins over [0, max finite value]; non-finite values are dropped.
Histogram histogram(std::span<const double> values, int bins);

double median(std::vector<double> values);

/// Label such as "16-255" for budgets that are whole multiples of 1/255.
std::string budget_label(double budget);

}  // namespace dadt::cli
