#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dadt/attacks.hpp"
#include "dadt/data_io.hpp"
#include "dadt/diffusion.hpp"
#include "dadt/models.hpp"
#include "dadt/purify.hpp"

namespace dadt::cli {

inline constexpr int kSchemaVersion = 1;

struct ScheduleSection {
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.1;
};

struct DenoiserSection {
  UNetConfig unet;  // channels and extents are filled in from the dataset
  int epochs = 40;
  int batch = 16;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::string checkpoint;
};

inline DenoiserSection denoiser_section(std::string checkpoint) {
  DenoiserSection d;
  d.checkpoint = std::move(checkpoint);
  return d;
}

struct AutoencoderSection {
  AutoencoderConfig ae;
  AutoencoderTrainOptions train;
  std::size_t holdout = 200;
  std::string checkpoint = "checkpoints/autoencoder.ckpt";
};

struct ModelsSection {
  ScheduleSection schedule;
  DenoiserSection pdm = denoiser_section("checkpoints/pdm.ckpt");
  AutoencoderSection autoencoder;
  DenoiserSection ldm = denoiser_section("checkpoints/ldm.ckpt");
};

enum class ModelChoice { ldm, pdm };

std::string_view to_string(ModelChoice m) noexcept;

enum class TargetKind { checkerboard, gray };

struct AttackSection {
  LossKind loss = LossKind::semantic_latent;
  ModelChoice model = ModelChoice::ldm;
  std::vector<double> budgets{16.0 / 255.0};
  double step = 1.0 / 255.0;
  int iterations = 100;
  int mc_samples = 1;
  double mist_weight = 1.0;
  int end_to_end_t_star = 5;
  TargetKind target = TargetKind::checkerboard;
  int target_period = 8;
  std::string input;  // image directory; empty means the generated eval set
};

struct EditSection {
  int t_star = 30;
  ModelChoice model = ModelChoice::ldm;
  std::string input;
};

struct PurifySection {
  PurifyConfig purify;
  std::string input;
};

struct EvaluationSection {
  std::vector<std::string> metrics{"fid", "ssim", "psnr", "perceptual", "cosine"};
  std::size_t eval_count = 200;
  int t_star = 30;  // evaluation edits
  std::string reference;
  std::vector<std::string> candidates;
  // reproduce
  std::vector<double> budgets{4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0};
  std::vector<LossKind> purify_attacks{LossKind::semantic_latent, LossKind::textural, LossKind::mist,
                                       LossKind::sds_plus,        LossKind::sds_minus, LossKind::ita};
  std::vector<PurifyMethod> purifiers{PurifyMethod::pdm_pure,   PurifyMethod::grid_pure,
                                      PurifyMethod::ldm_pure,   PurifyMethod::jpeg_dct,
                                      PurifyMethod::crop_resize, PurifyMethod::highfreq_filter};
  std::vector<int> ablation_t_stars{1, 10, 20};
  LossKind ablation_attack = LossKind::mist;
  int histogram_bins = 20;
  double alpha = 0.05;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  int workers = 0;  // 0: logical processor count
  std::filesystem::path output = "runs/default";
  SyntheticSpec dataset;
  ModelsSection models;
  AttackSection attack;
  EditSection edit;
  PurifySection purify;
  EvaluationSection evaluation;
  nlohmann::json source;  // merged document the fields were read from

  NoiseSchedule schedule() const;
  /// Resolves a configured path: relative paths live under the output directory.
  std::filesystem::path resolve(const std::string& path) const;
  int worker_count() const;
};

/// Reads a document, rejecting unknown keys, wrong types and out-of-domain
/// values with a ConfigError naming the offending path.
ExperimentConfig parse_config(const nlohmann::json& document);

/// Applies one `key.path=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& document, const std::string& assignment);

struct ConfigSources {
  std::optional<std::filesystem::path> file;
  std::vector<std::string> overrides;
  std::optional<std::filesystem::path> output;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

ExperimentConfig load_config(const ConfigSources& sources);

/// Minimal valid document; every other field takes its default.
nlohmann::json default_document();

/// Parses "a/b" or a plain decimal.
double parse_fraction(const std::string& text);

/// Seed for item `index` of a named component: the derivation is
/// splitmix64(seed ^ splitmix64(stream_id(label) + index)).
std::uint64_t item_seed(std::uint64_t seed, std::string_view label, std::uint64_t index);

}  // namespace dadt::cli
