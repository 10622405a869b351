#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dadt/graph.hpp"
#include "dadt/parameters.hpp"
#include "dadt/rng.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

/// Discrete DDPM schedule. Steps are 1-based: beta(1) .. beta(T);
/// alpha_bar(0) is defined as 1.
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1));
  }
  /// Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
  double posterior_variance(int t) const;
};

/// Betas linearly interpolated from beta_start to beta_end inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// Default toy schedule: T = 100, betas 1e-4 .. 0.1 (abar_T ~ 0.0055).
NoiseSchedule default_schedule();

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);
Tensor q_sample_at(const Tensor& x0, double alpha_bar, const Tensor& eps);

/// eps_theta(x_t, t). Implementations add their forward pass to a graph so
/// losses can differentiate through it; `t` is a [B] leaf of step indices.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  virtual Var build(ComputationGraph& g, Var x_t, Var t) const = 0;
  virtual void bind(Bindings&) const {}
  virtual ParameterSet* mutable_parameters() { return nullptr; }

  /// Forward evaluation for a batch x_t[B, ...] with per-sample steps.
  Tensor predict(const Tensor& x_t, std::span<const int> t) const;
  Tensor predict(const Tensor& x_t, int t) const;
};

/// lambda(t); an empty function means lambda == 1.
using LossWeight = std::function<double(int)>;

/// Graph for lambda(t) * MSE(eps_theta(q_sample(x0, t, eps), t), eps),
/// averaged over the batch. Leaves: "x0" plus the model parameters.
struct TrainingLoss {
  static constexpr const char* kLoss = "loss";
  static constexpr const char* kX0 = "x0";

  ComputationGraph graph;
  Bindings bindings;
  std::vector<int> steps;
  Tensor eps;
};

/// Draws t uniform on {1..T} and eps ~ N(0, I) per sample. Parameter tensors
/// are borrowed: the model must outlive the returned bindings.
TrainingLoss training_loss(const NoisePredictor& model, const Tensor& x0, const NoiseSchedule& schedule,
                           Rng& rng, const LossWeight& weight = {});

struct TrainOptions {
  int epochs = 1;
  int batch = 16;
  double lr = 1e-3;
  double clip_norm = 1.0;
  LossWeight weight;
  std::function<void(long step, double loss)> on_step;
};

struct TrainReport {
  std::vector<double> losses;
  double initial_mean = 0.0;  // mean of the first 10 batch losses
  double final_mean = 0.0;    // mean of the last 10 batch losses
  bool improved() const { return final_mean < initial_mean; }
};

/// Adam on the simple denoising objective. Throws NumericError if the loss
/// becomes non-finite.
TrainReport train(NoisePredictor& model, std::span<const Tensor> dataset, const NoiseSchedule& schedule,
                  const TrainOptions& options, Rng& rng);

/// Mean of p_theta(x_{t-1} | x_t): (x_t - beta_t / sqrt(1 - abar_t) eps_theta) / sqrt(alpha_t).
Tensor posterior_mean(const NoisePredictor& model, const Tensor& x_t, int t, const NoiseSchedule& schedule);

/// One ancestral step; noise is omitted at t == 1.
Tensor denoise_step(const NoisePredictor& model, const Tensor& x_t, int t, const NoiseSchedule& schedule,
                    Rng& rng);

/// Ancestral sampling from x_T ~ N(0, I). No clamping.
Tensor sample(const NoisePredictor& model, const Shape& shape, const NoiseSchedule& schedule, Rng& rng);

struct EditConfig {
  int t_star = 10;
  std::uint64_t seed = 0;
};

/// SDEdit: diffuse x to t_star, then denoise back to step 0. t_star == 0
/// returns x unchanged.
Tensor sdedit(const NoisePredictor& model, const Tensor& x, int t_star, const NoiseSchedule& schedule,
              Rng& rng);
Tensor sdedit(const NoisePredictor& model, const Tensor& x, const EditConfig& config,
              const NoiseSchedule& schedule);

/// Rng used by the EditConfig overload.
Rng edit_rng(const EditConfig& config);

void validate(const EditConfig& config, const NoiseSchedule& schedule);

/// Adds an unrolled SDEdit chain from `x` to the graph. Noise draws become
/// graph constants, so the chain is differentiable in x.
Var build_sdedit_chain(ComputationGraph& g, const NoisePredictor& model, Var x, int t_star,
                       const NoiseSchedule& schedule, Rng& rng);

}  // namespace dadt
