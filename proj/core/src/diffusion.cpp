#include "dadt/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dadt/errors.hpp"
#include "dadt/optim.hpp"

namespace dadt {

double NoiseSchedule::posterior_variance(int t) const {
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("schedule needs at least 2 steps, got " + std::to_string(steps));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alphas.resize(s.betas.size());
  s.alpha_bars.resize(s.betas.size());
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const auto k = static_cast<std::size_t>(i);
    s.betas[k] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
    s.alphas[k] = 1.0 - s.betas[k];
    running *= s.alphas[k];
    s.alpha_bars[k] = running;
  }
  return s;
}

NoiseSchedule default_schedule() { return make_linear_schedule(100, 1e-4, 0.1); }

Tensor q_sample_at(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  if (x0.shape() != eps.shape())
    throw ShapeError("q_sample: eps shape " + shape_string(eps.shape()) + " != x0 shape " +
                     shape_string(x0.shape()));
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps)
    throw ConfigError("q_sample: step " + std::to_string(t) + " outside [1, " +
                      std::to_string(schedule.steps) + "]");
  return q_sample_at(x0, schedule.alpha_bar(t), eps);
}

Tensor NoisePredictor::predict(const Tensor& x_t, std::span<const int> t) const {
  if (t.size() != x_t.dim(0)) throw ShapeError("predict: one step index per batch item required");
  ComputationGraph g;
  Var x = g.input("x_t", x_t.shape());
  Var steps = g.input("t", {t.size()});
  g.mark_output("eps", build(g, x, steps));
  Bindings b;
  bind(b);
  b.bind_ref("x_t", x_t);
  Tensor tt({t.size()});
  for (std::size_t i = 0; i < t.size(); ++i) tt[i] = static_cast<double>(t[i]);
  b.bind("t", std::move(tt));
  return evaluate(g, b).at("eps");
}

Tensor NoisePredictor::predict(const Tensor& x_t, int t) const {
  const std::vector<int> steps(x_t.dim(0), t);
  return predict(x_t, steps);
}

TrainingLoss training_loss(const NoisePredictor& model, const Tensor& x0, const NoiseSchedule& schedule,
                           Rng& rng, const LossWeight& weight) {
  const std::size_t batch = x0.dim(0);
  TrainingLoss out;
  out.steps.resize(batch);
  Tensor signal({batch}), noise({batch}), tt({batch}), w({batch});
  for (std::size_t i = 0; i < batch; ++i) {
    const int t = static_cast<int>(rng.uniform_int(1, schedule.steps));
    out.steps[i] = t;
    signal[i] = std::sqrt(schedule.alpha_bar(t));
    noise[i] = std::sqrt(1.0 - schedule.alpha_bar(t));
    tt[i] = t;
    w[i] = (weight ? weight(t) : 1.0) / static_cast<double>(batch);
  }
  out.eps = rng.normal_tensor(x0.shape());

  auto& g = out.graph;
  Var x = g.input(TrainingLoss::kX0, x0.shape());
  Var e = g.input("eps", x0.shape());
  Var a = g.input("coef_signal", {batch});
  Var s = g.input("coef_noise", {batch});
  Var steps = g.input("t", {batch});
  Var wt = g.input("weight", {batch});
  Var x_t = g.add(g.mul_per_sample(x, a), g.mul_per_sample(e, s));
  Var pred = model.build(g, x_t, steps);
  Var loss = g.dot(g.row_mean_square(g.sub(pred, e)), wt);
  g.mark_output(TrainingLoss::kLoss, loss);

  model.bind(out.bindings);
  out.bindings.bind(TrainingLoss::kX0, x0);
  out.bindings.bind("eps", out.eps);
  out.bindings.bind("coef_signal", std::move(signal));
  out.bindings.bind("coef_noise", std::move(noise));
  out.bindings.bind("t", std::move(tt));
  out.bindings.bind("weight", std::move(w));
  return out;
}

TrainReport train(NoisePredictor& model, std::span<const Tensor> dataset, const NoiseSchedule& schedule,
                  const TrainOptions& options, Rng& rng) {
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  if (options.batch < 1) throw ConfigError("train: batch must be >= 1");
  for (const auto& item : dataset)
    if (item.shape() != dataset[0].shape()) throw ShapeError("train: dataset items differ in shape");
  ParameterSet* params = model.mutable_parameters();
  if (!params) throw ConfigError("train: model has no trainable parameters");
  std::set<std::string> wrt;
  for (const auto& [name, t] : *params) wrt.insert(name);

  AdamOptimizer adam({.lr = options.lr, .clip_norm = options.clip_norm});
  TrainReport report;
  std::vector<std::size_t> order(dataset.size());
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch));
      std::vector<Tensor> items;
      for (std::size_t k = start; k < end; ++k) items.push_back(dataset[order[k]]);
      Tensor x0 = stack(items);
      auto loss = training_loss(model, x0, schedule, rng, options.weight);
      GradientResult r;
      try {
        r = gradient(loss.graph, loss.bindings, TrainingLoss::kLoss, wrt);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      const double value = r.value();
      if (!std::isfinite(value))
        throw NumericError("training diverged at step " + std::to_string(step) + " (loss not finite)");
      adam.step(*params, r.gradients);
      report.losses.push_back(value);
      if (options.on_step) options.on_step(step, value);
      ++step;
    }
  }
  if (!report.losses.empty()) {
    const std::size_t k = std::min<std::size_t>(10, report.losses.size());
    report.initial_mean =
        std::accumulate(report.losses.begin(), report.losses.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
        static_cast<double>(k);
    report.final_mean =
        std::accumulate(report.losses.end() - static_cast<std::ptrdiff_t>(k), report.losses.end(), 0.0) /
        static_cast<double>(k);
  }
  return report;
}

Tensor posterior_mean(const NoisePredictor& model, const Tensor& x_t, int t, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps) throw ConfigError("denoise step " + std::to_string(t) + " out of range");
  const Tensor eps = model.predict(x_t, t);
  const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - coef * eps[i]) * inv_sqrt_alpha;
  return out;
}

Tensor denoise_step(const NoisePredictor& model, const Tensor& x_t, int t, const NoiseSchedule& schedule,
                    Rng& rng) {
  Tensor out = posterior_mean(model, x_t, t, schedule);
  if (t > 1) {
    const double sigma = std::sqrt(std::max(0.0, schedule.posterior_variance(t)));
    for (auto& v : out.storage()) v += sigma * rng.normal();
  }
  return out;
}

Tensor sample(const NoisePredictor& model, const Shape& shape, const NoiseSchedule& schedule, Rng& rng) {
  Tensor x = rng.normal_tensor(shape);
  for (int t = schedule.steps; t >= 1; --t) x = denoise_step(model, x, t, schedule, rng);
  return x;
}

void validate(const EditConfig& config, const NoiseSchedule& schedule) {
  if (config.t_star < 0 || config.t_star > schedule.steps)
    throw ConfigError("edit t_star " + std::to_string(config.t_star) + " outside [0, " +
                      std::to_string(schedule.steps) + "]");
}

Tensor sdedit(const NoisePredictor& model, const Tensor& x, int t_star, const NoiseSchedule& schedule,
              Rng& rng) {
  validate(EditConfig{t_star, 0}, schedule);
  if (t_star == 0) return x;
  const Tensor eps = rng.normal_tensor(x.shape());
  Tensor y = q_sample(x, t_star, eps, schedule);
  for (int t = t_star; t >= 1; --t) y = denoise_step(model, y, t, schedule, rng);
  return y;
}

Rng edit_rng(const EditConfig& config) { return Rng(config.seed, stream_id(streams::kEdit)); }

Tensor sdedit(const NoisePredictor& model, const Tensor& x, const EditConfig& config,
              const NoiseSchedule& schedule) {
  Rng rng = edit_rng(config);
  return sdedit(model, x, config.t_star, schedule, rng);
}

Var build_sdedit_chain(ComputationGraph& g, const NoisePredictor& model, Var x, int t_star,
                       const NoiseSchedule& schedule, Rng& rng) {
  validate(EditConfig{t_star, 0}, schedule);
  if (t_star == 0) return x;
  const Shape shape = g.shape(x);
  const std::size_t batch = shape[0];
  auto _ = g.scope("sdedit");
  Var eps = g.constant(rng.normal_tensor(shape));
  Var y = g.add(g.scale(x, std::sqrt(schedule.alpha_bar(t_star))),
                g.scale(eps, std::sqrt(1.0 - schedule.alpha_bar(t_star))));
  for (int t = t_star; t >= 1; --t) {
    Var steps = g.constant(Tensor({batch}, static_cast<double>(t)));
    Var pred = model.build(g, y, steps);
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    y = g.scale(g.sub(y, g.scale(pred, coef)), inv_sqrt_alpha);
    if (t > 1) {
      const double sigma = std::sqrt(std::max(0.0, schedule.posterior_variance(t)));
      y = g.add(y, g.constant(scaled(rng.normal_tensor(shape), sigma)));
    }
  }
  return y;
}

}  // namespace dadt
