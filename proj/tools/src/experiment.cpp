#include "dadt/cli/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "dadt/cli/log.hpp"
#include "dadt/data_io.hpp"
#include "dadt/errors.hpp"

namespace dadt::cli {

namespace fs = std::filesystem;

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string image_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%04zu.ppm", index);
  return buf;
}

std::vector<Tensor> load_image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("image directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm images in " + dir.string());
  std::vector<Tensor> images;
  images.reserve(files.size());
  for (const auto& f : files) images.push_back(load_image(f));
  for (const auto& img : images)
    if (img.shape() != images.front().shape())
      throw ShapeError("images in " + dir.string() + " do not share one size");
  return images;
}

void save_image_set(std::span<const Tensor> images, const fs::path& dir) {
  for (std::size_t i = 0; i < images.size(); ++i) save_image(images[i], dir / image_name(i));
}

SyntheticSpec training_spec(const ExperimentConfig& c) { return c.dataset; }

SyntheticSpec holdout_spec(const ExperimentConfig& c) {
  SyntheticSpec s = c.dataset;
  s.seed = item_seed(c.dataset.seed, "holdout", 0);
  s.count = c.models.autoencoder.holdout;
  return s;
}

SyntheticSpec eval_spec(const ExperimentConfig& c) {
  SyntheticSpec s = c.dataset;
  s.seed = item_seed(c.dataset.seed, "eval", 0);
  s.count = c.evaluation.eval_count;
  return s;
}

const DenoiserModel& ModelBundle::need_pdm() const {
  if (!pdm) throw ConfigError("this step needs the pixel diffusion model");
  return *pdm;
}

const LatentDiffusionModel& ModelBundle::need_ldm() const {
  if (!ldm) throw ConfigError("this step needs the latent diffusion model");
  return *ldm;
}

Featurizer ModelBundle::featurizer() const { return Featurizer(need_ldm().autoencoder); }

void require_checkpoints(const ExperimentConfig& c, bool pdm, bool ldm) {
  auto need = [&](const std::string& key, const std::string& path) {
    const fs::path p = c.resolve(path);
    if (!fs::is_regular_file(p))
      throw ConfigError(key + ": checkpoint " + p.string() + " does not exist (run `dadt train` first)");
  };
  if (pdm) need("models.pdm.checkpoint", c.models.pdm.checkpoint);
  if (ldm) {
    need("models.autoencoder.checkpoint", c.models.autoencoder.checkpoint);
    need("models.ldm.checkpoint", c.models.ldm.checkpoint);
  }
}

ModelBundle load_models(const ExperimentConfig& c, bool pdm, bool ldm) {
  require_checkpoints(c, pdm, ldm);
  ModelBundle m;
  const NoiseSchedule expected = c.schedule();
  auto check = [&](const DenoiserModel& d, const std::string& key, const UNetConfig& cfg) {
    if (d.schedule().betas != expected.betas)
      throw ConfigError(key + ": checkpoint schedule differs from models.schedule");
    if (d.config().sample_shape() != cfg.sample_shape() || d.config().widths != cfg.widths)
      throw ConfigError(key + ": checkpoint architecture differs from the configured one");
  };
  if (pdm) {
    m.pdm.emplace(denoiser_from_checkpoint(load_checkpoint(c.resolve(c.models.pdm.checkpoint))));
    check(*m.pdm, "models.pdm.checkpoint", c.models.pdm.unet);
  }
  if (ldm) {
    Autoencoder ae = autoencoder_from_checkpoint(load_checkpoint(c.resolve(c.models.autoencoder.checkpoint)));
    DenoiserModel den = denoiser_from_checkpoint(load_checkpoint(c.resolve(c.models.ldm.checkpoint)));
    check(den, "models.ldm.checkpoint", c.models.ldm.unet);
    m.ldm.emplace(std::move(ae), std::move(den));
  }
  return m;
}

std::optional<Tensor> attack_target(const AttackSection& a, LossKind loss, const Shape& image_shape,
                                    std::uint64_t seed, std::size_t index) {
  if (!needs_target(loss)) return std::nullopt;
  // end_to_end compares a decoded edit with the target, so it defaults to gray.
  const TargetKind kind = loss == LossKind::end_to_end ? TargetKind::gray : a.target;
  if (kind == TargetKind::gray) return gray_target(image_shape);
  return checkerboard_target(image_shape, a.target_period, item_seed(seed, "target", index));
}

namespace {

Tensor batch1(const Tensor& x) { return x.rank() == 4 ? x : x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}); }

Tensor unbatch(const Tensor& x) { return x.rank() == 3 ? x : x.reshaped({x.dim(1), x.dim(2), x.dim(3)}); }

/// Logs progress roughly every tenth of a set.
class Progress {
 public:
  Progress(std::string what, std::size_t total) : what_(std::move(what)), total_(total) {}
  void tick() {
    const std::size_t done = ++done_;
    const std::size_t step = std::max<std::size_t>(1, total_ / 10);
    if (done % step == 0 || done == total_) log().info("{}: {}/{}", what_, done, total_);
  }

 private:
  std::string what_;
  std::size_t total_;
  std::atomic<std::size_t> done_{0};
};

}  // namespace

std::vector<AttackResult> attack_set(const ModelBundle& models, std::span<const Tensor> images,
                                     const AttackSection& section, const SetAttack& what, int workers) {
  AttackModels am;
  if (models.pdm) am.pdm = &*models.pdm;
  if (models.ldm) am.ldm = &*models.ldm;
  std::vector<AttackResult> results(images.size());
  Progress progress(std::string("attack ") + std::string(to_string(what.loss)) + " " + budget_label(what.budget),
                    images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) {
    AttackConfig cfg;
    cfg.budget = what.budget;
    cfg.step = std::min(section.step, what.budget > 0.0 ? what.budget : section.step);
    cfg.iterations = section.iterations;
    cfg.loss = what.loss;
    cfg.mc_samples = section.mc_samples;
    cfg.mist_weight = section.mist_weight;
    cfg.end_to_end_t_star = section.end_to_end_t_star;
    cfg.seed = item_seed(what.seed, "attack", i);
    cfg.target = attack_target(section, what.loss, images[i].shape(), what.seed, i);
    AttackResult r = run_attack(am, batch1(images[i]), cfg);
    r.x_adv = unbatch(r.x_adv);
    double worst = 0.0;
    for (std::size_t k = 0; k < r.x_adv.size(); ++k) {
      const double v = r.x_adv[k];
      if (!(v >= 0.0 && v <= 1.0))
        throw NumericError("attack produced a pixel outside [0, 1] for image " + std::to_string(i));
      worst = std::max(worst, std::abs(v - images[i][k]));
    }
    if (worst > what.budget + 1e-12)
      throw NumericError("attack left the l_inf ball for image " + std::to_string(i) + " (" +
                         format_number(worst) + " > " + format_number(what.budget) + ")");
    results[i] = std::move(r);
    progress.tick();
  });
  return results;
}

std::vector<Tensor> edit_set(const ModelBundle& models, ModelChoice model, std::span<const Tensor> images,
                             int t_star, std::uint64_t seed, const std::string& label, int workers) {
  std::vector<Tensor> out(images.size());
  Progress progress("edit " + label, images.size());
  const std::string stream = "edit:" + label;
  parallel_for(images.size(), workers, [&](std::size_t i) {
    Rng rng(item_seed(seed, stream, i), stream_id(streams::kEdit));
    const Tensor x = batch1(images[i]);
    out[i] = unbatch(model == ModelChoice::ldm ? ldm_edit(models.need_ldm(), x, t_star, rng)
                                               : pixel_edit(models.need_pdm(), x, t_star, rng));
    progress.tick();
  });
  return out;
}

std::vector<Tensor> purify_set(const ModelBundle& models, std::span<const Tensor> images, PurifyConfig config,
                               std::uint64_t seed, const std::string& label, int workers) {
  std::vector<Tensor> out(images.size());
  Progress progress("purify " + label, images.size());
  const std::string stream = "purify:" + label;
  const DenoiserModel* pdm = models.pdm ? &*models.pdm : nullptr;
  const LatentDiffusionModel* ldm = models.ldm ? &*models.ldm : nullptr;
  parallel_for(images.size(), workers, [&](std::size_t i) {
    PurifyConfig c = config;
    c.seed = item_seed(seed, stream, i);
    out[i] = unbatch(purify(c, batch1(images[i]), pdm, ldm));
    progress.tick();
  });
  return out;
}

PairedTest paired_t_test(std::span<const double> d) {
  PairedTest r;
  r.n = d.size();
  if (r.n < 2) throw ConfigError("paired test needs at least 2 pairs");
  for (double v : d) r.mean += v;
  r.mean /= static_cast<double>(r.n);
  double ss = 0.0;
  for (double v : d) ss += (v - r.mean) * (v - r.mean);
  const double sd = std::sqrt(ss / static_cast<double>(r.n - 1));
  r.stderr_ = sd / std::sqrt(static_cast<double>(r.n));
  if (r.stderr_ == 0.0) {
    r.t = r.mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.mean);
    r.p_value = r.mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = r.mean / r.stderr_;
  const boost::math::students_t dist(static_cast<double>(r.n - 1));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

Histogram histogram(std::span<const double> values, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  Histogram h;
  double hi = 0.0;
  for (double v : values)
    if (std::isfinite(v)) hi = std::max(hi, v);
  if (hi == 0.0) hi = 1.0;
  for (int k = 0; k <= bins; ++k) h.edges.push_back(hi * k / bins);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) continue;
    auto k = static_cast<std::size_t>(v / hi * bins);
    h.counts[std::min(k, h.counts.size() - 1)]++;
  }
  return h;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string budget_label(double budget) {
  const double k = budget * 255.0;
  if (std::abs(k - std::round(k)) < 1e-9) return std::to_string(static_cast<long>(std::round(k))) + "-255";
  return format_number(budget);
}

}  // namespace dadt::cli
