#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dadt/cli/config.hpp"
#include "dadt/cli/experiment.hpp"
#include "dadt/data_io.hpp"

namespace dadt::cli {

struct TrainSummary {
  std::uint64_t pdm_hash = 0, autoencoder_hash = 0, ldm_hash = 0;
  double pdm_final_loss = 0.0, ldm_final_loss = 0.0;
  AutoencoderReport autoencoder;
};

/// Trains the PDM, the autoencoder and the latent denoiser (in that order),
/// writes checkpoints and train/report.json plus per-model loss curves.
TrainSummary cmd_train(const ExperimentConfig& c);

/// Attacks the input set once per budget into attack/<loss>_<budget>/ with a
/// results.json sidecar. Returns the per-budget results.
std::vector<std::vector<AttackResult>> cmd_attack(const ExperimentConfig& c);

/// Edits the input set into edit/.
void cmd_edit(const ExperimentConfig& c);

/// Purifies the input set into purify/<method>/.
void cmd_purify(const ExperimentConfig& c);

/// Metrics of each candidate directory against the reference set, written to
/// evaluate/metrics.{csv,json}.
Table cmd_evaluate(const ExperimentConfig& c);

struct AsymmetryRow {
  ModelChoice model = ModelChoice::ldm;
  double budget = 0.0;
  double fid_clean = 0.0, fid_adv = 0.0;
  PairedTest ssim;  // per-image SSIM(edit(adv), x) - SSIM(edit(x), x)
};

struct ReproduceResult {
  std::vector<AsymmetryRow> asymmetry;
  std::vector<double> amplification;  // successful LDM attacks at the largest budget
  double amplification_median = 0.0;
  double fid_before = 0.0;  // LDM edit of clean images
  std::map<LossKind, double> fid_after;
  std::map<LossKind, std::map<PurifyMethod, double>> fid_purified;
  std::vector<std::pair<int, double>> ablation;  // (t*, FID-lite after pdm_pure at t*)
  std::filesystem::path bundle;
  double asymmetry_seconds = 0.0, purification_seconds = 0.0;  // wall time of sections (a) and (b)
};

/// Regenerates the attack and purification tables, the t* ablation and the
/// amplification histogram under reproduce/. Tables are flushed as they
/// complete, so a failure leaves the finished parts on disk.
ReproduceResult cmd_reproduce(const ExperimentConfig& c);

struct GradcheckCase {
  std::string name;
  std::size_t parameters = 0;
  double max_relative_error = 0.0;
};

/// Reverse mode against central differences on `count` random small
/// networks (at most 10^4 parameters each).
std::vector<GradcheckCase> random_network_gradchecks(std::uint64_t seed, int count);

/// Runs the gradient suite and writes gradcheck/report.{csv,json}. Returns
/// false when any network exceeds the tolerance.
bool cmd_gradcheck(const ExperimentConfig& c, int networks = 20, double tolerance = 1e-4);

}  // namespace dadt::cli
