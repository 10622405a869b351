#include "dadt/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "dadt/cli/log.hpp"
#include "dadt/errors.hpp"

namespace dadt::cli {

namespace fs = std::filesystem;
using ordered = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Configured output path, refused when it would land outside the output directory.
fs::path output_path(const ExperimentConfig& c, const std::string& key, const std::string& path) {
  const fs::path p = c.resolve(path).lexically_normal();
  const fs::path rel = p.lexically_relative(c.output.lexically_normal());
  if (rel.empty() || *rel.begin() == "..")
    throw ConfigError(key + ": " + p.string() + " is outside the output directory " + c.output.string());
  return p;
}

void write_json(const fs::path& path, const ordered& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<Tensor> generated_eval_set(const ExperimentConfig& c) {
  return generate_synthetic_dataset(eval_spec(c)).images;
}

/// Input set of a command: a directory, or the generated evaluation set
/// (then also saved under clean/ so later commands can name it).
std::vector<Tensor> input_set(const ExperimentConfig& c, const std::string& dir) {
  if (!dir.empty()) return load_image_dir(c.resolve(dir));
  auto images = generated_eval_set(c);
  save_image_set(images, c.output / "clean");
  return images;
}

void check_input_dir(const ExperimentConfig& c, const std::string& key, const std::string& dir) {
  if (!dir.empty() && !fs::is_directory(c.resolve(dir)))
    throw ConfigError(key + ": directory " + c.resolve(dir).string() + " does not exist");
}

void check_image_size(const ExperimentConfig& c, std::span<const Tensor> images, const std::string& what) {
  const Shape expected{3, c.dataset.size, c.dataset.size};
  if (!images.empty() && images.front().shape() != expected)
    throw ShapeError(what + ": images are " + shape_string(images.front().shape()) + ", models expect " +
                     shape_string(expected));
}

Autoencoder load_autoencoder(const ExperimentConfig& c) {
  const fs::path p = c.resolve(c.models.autoencoder.checkpoint);
  if (!fs::is_regular_file(p))
    throw ConfigError("models.autoencoder.checkpoint: checkpoint " + p.string() +
                      " does not exist (run `dadt train` first)");
  return autoencoder_from_checkpoint(load_checkpoint(p));
}

Table loss_curve(const std::vector<double>& losses) {
  Table t{{"step", "loss"}, {}};
  for (std::size_t i = 0; i < losses.size(); ++i) t.add({static_cast<double>(i), losses[i]});
  return t;
}

TrainOptions train_options(const DenoiserSection& d, const std::string& name) {
  TrainOptions o;
  o.epochs = d.epochs;
  o.batch = d.batch;
  o.lr = d.lr;
  o.clip_norm = d.clip_norm;
  o.on_step = [name](long step, double loss) {
    if (step % 100 == 0) log().info("train {}: step {} loss {:.5f}", name, step, loss);
  };
  return o;
}

std::vector<Tensor> encode_all(const Autoencoder& ae, std::span<const Tensor> images) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    const Tensor z = ae.encode(stack(std::vector<Tensor>(images.begin() + static_cast<std::ptrdiff_t>(start),
                                                         images.begin() + static_cast<std::ptrdiff_t>(end))));
    for (std::size_t i = 0; i < end - start; ++i) out.push_back(z.batch_item(i).reshaped(ae.config().latent_shape()));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// train

TrainSummary cmd_train(const ExperimentConfig& c) {
  if (c.dataset.count < 1) throw ConfigError("dataset.count: training needs at least one image");
  const fs::path pdm_path = output_path(c, "models.pdm.checkpoint", c.models.pdm.checkpoint);
  const fs::path ae_path = output_path(c, "models.autoencoder.checkpoint", c.models.autoencoder.checkpoint);
  const fs::path ldm_path = output_path(c, "models.ldm.checkpoint", c.models.ldm.checkpoint);
  const auto start = Clock::now();
  const NoiseSchedule schedule = c.schedule();
  const Rng init(c.seed, stream_id(streams::kInit));
  const Rng training(c.seed, stream_id(streams::kTraining));
  TrainSummary summary;

  log().info("train: generating {} synthetic images", c.dataset.count);
  const Dataset data = generate_synthetic_dataset(training_spec(c));
  const Dataset holdout = generate_synthetic_dataset(holdout_spec(c));

  {
    Rng init_rng = init.fork(0), train_rng = training.fork(0);
    DenoiserModel pdm(c.models.pdm.unet, schedule, init_rng, "pdm");
    log().info("train pdm: {} parameters", pdm.parameters().count());
    const TrainReport r = train(pdm, data.images, schedule, train_options(c.models.pdm, "pdm"), train_rng);
    pdm.mutable_parameters()->round_to_float();
    save_checkpoint(to_checkpoint(pdm, ModelKind::pixel_denoiser), pdm_path);
    write_report(loss_curve(r.losses), c.output / "train" / "pdm_loss");
    summary.pdm_hash = pdm.parameters().hash();
    summary.pdm_final_loss = r.final_mean;
    if (!r.improved()) log().warn("train pdm: loss did not decrease ({} -> {})", r.initial_mean, r.final_mean);
  }

  Rng init_rng = init.fork(1), train_rng = training.fork(1);
  Autoencoder ae(c.models.autoencoder.ae, init_rng);
  log().info("train autoencoder: {} parameters", ae.parameters().count());
  summary.autoencoder = train_autoencoder(ae, data.images, holdout.images, c.models.autoencoder.train, train_rng);
  ae.mutable_parameters().round_to_float();
  save_checkpoint(to_checkpoint(ae), ae_path);
  write_report(loss_curve(summary.autoencoder.losses), c.output / "train" / "autoencoder_loss");
  summary.autoencoder_hash = ae.parameters().hash();
  if (!summary.autoencoder.passed)
    log().warn("train autoencoder: held-out MAE {} exceeds {}", summary.autoencoder.holdout_mae,
               c.models.autoencoder.train.mae_threshold);

  {
    Rng ldm_init = init.fork(2), ldm_train = training.fork(2);
    const std::vector<Tensor> latents = encode_all(ae, data.images);
    DenoiserModel den(c.models.ldm.unet, schedule, ldm_init, "ldm");
    log().info("train ldm: {} parameters on latents {}", den.parameters().count(),
               shape_string(latents.front().shape()));
    const TrainReport r = train(den, latents, schedule, train_options(c.models.ldm, "ldm"), ldm_train);
    den.mutable_parameters()->round_to_float();
    save_checkpoint(to_checkpoint(den, ModelKind::latent_denoiser), ldm_path);
    write_report(loss_curve(r.losses), c.output / "train" / "ldm_loss");
    summary.ldm_hash = den.parameters().hash();
    summary.ldm_final_loss = r.final_mean;
    if (!r.improved()) log().warn("train ldm: loss did not decrease ({} -> {})", r.initial_mean, r.final_mean);
  }

  ordered report;
  report["pdm"] = {{"checkpoint", pdm_path.string()}, {"hash", hex(summary.pdm_hash)},
                   {"final_loss", summary.pdm_final_loss}};
  report["autoencoder"] = {{"checkpoint", ae_path.string()},
                           {"hash", hex(summary.autoencoder_hash)},
                           {"holdout_mae", summary.autoencoder.holdout_mae},
                           {"latent_scale", summary.autoencoder.latent_scale},
                           {"passed", summary.autoencoder.passed}};
  report["ldm"] = {{"checkpoint", ldm_path.string()}, {"hash", hex(summary.ldm_hash)},
                   {"final_loss", summary.ldm_final_loss}};
  write_json(c.output / "train" / "report.json", report);

  const double elapsed = seconds_since(start);
  log().info("train: done in {:.0f} s", elapsed);
  if (elapsed > 1800.0) log().warn("train: took {:.0f} s, over the 30 min budget", elapsed);
  return summary;
}

// ---------------------------------------------------------------------------
// attack / edit / purify / evaluate

std::vector<std::vector<AttackResult>> cmd_attack(const ExperimentConfig& c) {
  const auto& a = c.attack;
  check_input_dir(c, "attack.input", a.input);
  const bool pdm = a.model == ModelChoice::pdm;
  require_checkpoints(c, pdm, !pdm);
  const ModelBundle models = load_models(c, pdm, !pdm);
  const auto images = input_set(c, a.input);
  check_image_size(c, images, "attack input");

  std::vector<std::vector<AttackResult>> all;
  for (double budget : a.budgets) {
    const auto start = Clock::now();
    auto results = attack_set(models, images, a, {a.loss, budget, c.seed}, c.worker_count());
    const fs::path dir = c.output / "attack" / (std::string(to_string(a.loss)) + "_" + budget_label(budget));
    ordered side;
    side["loss"] = to_string(a.loss);
    side["model"] = to_string(a.model);
    side["budget"] = budget;
    side["step"] = std::min(a.step, budget > 0.0 ? budget : a.step);
    side["iterations"] = a.iterations;
    side["images"] = ordered::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      save_image(results[i].x_adv, dir / image_name(i));
      for (const auto& w : results[i].warnings) log().warn("attack image {}: {}", i, w);
      side["images"].push_back({{"file", image_name(i)},
                                {"linf", results[i].linf},
                                {"losses", results[i].losses},
                                {"warnings", results[i].warnings}});
    }
    write_json(dir / "results.json", side);
    log().info("attack {}: {} images in {:.1f} s -> {}", budget_label(budget), images.size(), seconds_since(start),
               dir.string());
    all.push_back(std::move(results));
  }
  return all;
}

void cmd_edit(const ExperimentConfig& c) {
  check_input_dir(c, "edit.input", c.edit.input);
  const bool pdm = c.edit.model == ModelChoice::pdm;
  require_checkpoints(c, pdm, !pdm);
  const ModelBundle models = load_models(c, pdm, !pdm);
  const auto images = input_set(c, c.edit.input);
  check_image_size(c, images, "edit input");
  const auto edited = edit_set(models, c.edit.model, images, c.edit.t_star, c.seed, "edit", c.worker_count());
  save_image_set(edited, c.output / "edit");
}

void cmd_purify(const ExperimentConfig& c) {
  check_input_dir(c, "purify.input", c.purify.input);
  const PurifyMethod m = c.purify.purify.method;
  const bool pdm = m == PurifyMethod::pdm_pure || m == PurifyMethod::grid_pure;
  const bool ldm = m == PurifyMethod::ldm_pure;
  require_checkpoints(c, pdm, ldm);
  const ModelBundle models = load_models(c, pdm, ldm);
  const auto images = input_set(c, c.purify.input);
  check_image_size(c, images, "purify input");
  const auto purified = purify_set(models, images, c.purify.purify, c.seed, std::string(to_string(m)),
                                   c.worker_count());
  save_image_set(purified, c.output / "purify" / std::string(to_string(m)));
}

Table cmd_evaluate(const ExperimentConfig& c) {
  const auto& e = c.evaluation;
  if (e.candidates.empty()) throw ConfigError("evaluation.candidates: give at least one image directory");
  check_input_dir(c, "evaluation.reference", e.reference);
  for (std::size_t i = 0; i < e.candidates.size(); ++i)
    check_input_dir(c, "evaluation.candidates[" + std::to_string(i) + "]", e.candidates[i]);
  const Featurizer f(load_autoencoder(c));

  const auto reference = e.reference.empty() ? generated_eval_set(c) : load_image_dir(c.resolve(e.reference));
  std::vector<std::vector<Tensor>> candidates;
  const bool fid = std::find(e.metrics.begin(), e.metrics.end(), "fid") != e.metrics.end();
  for (const auto& dir : e.candidates) {
    candidates.push_back(load_image_dir(c.resolve(dir)));
    if (candidates.back().size() != reference.size())
      throw ShapeError("evaluate: " + dir + " has " + std::to_string(candidates.back().size()) +
                       " images, the reference has " + std::to_string(reference.size()));
  }
  if (fid && reference.size() < f.dim() + 1)
    throw ConfigError("evaluate: the Frechet distance needs at least " + std::to_string(f.dim() + 1) +
                      " images per set, got " + std::to_string(reference.size()));

  Table t{{"candidate", "metric", "value", "stderr", "count"}, {}};
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const MetricReport r = evaluate_metrics(reference, candidates[k], f);
    for (const auto& m : e.metrics) {
      const MetricValue& v = m == "fid"          ? r.frechet
                             : m == "ssim"       ? r.ssim
                             : m == "psnr"       ? r.psnr
                             : m == "perceptual" ? r.perceptual
                                                 : r.cosine;
      t.add({e.candidates[k], m, v.value, v.stderr_, static_cast<double>(v.count)});
    }
  }
  write_report(t, c.output / "evaluate" / "metrics");
  return t;
}

// ---------------------------------------------------------------------------
// reproduce

namespace {

double metric_of(const MetricReport& r, const std::string& m) {
  if (m == "fid") return r.frechet.value;
  if (m == "ssim") return r.ssim.value;
  if (m == "psnr") return r.psnr.value;
  if (m == "perceptual") return r.perceptual.value;
  return r.cosine.value;
}

std::vector<double> per_image_ssim(std::span<const Tensor> reference, std::span<const Tensor> candidate) {
  std::vector<double> out(reference.size());
  for (std::size_t i = 0; i < reference.size(); ++i) out[i] = ssim(reference[i], candidate[i]);
  return out;
}

std::vector<Tensor> adv_images(const std::vector<AttackResult>& results) {
  std::vector<Tensor> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(r.x_adv);
  return out;
}

}  // namespace

ReproduceResult cmd_reproduce(const ExperimentConfig& c) {
  const auto& e = c.evaluation;
  require_checkpoints(c, true, true);
  const auto start = Clock::now();
  const ModelBundle models = load_models(c, true, true);
  const Featurizer f = models.featurizer();
  const int workers = c.worker_count();
  const fs::path dir = c.output / "reproduce";
  ReproduceResult out;
  out.bundle = dir;
  write_json(dir / "config.json", ordered::parse(c.source.dump()));

  const std::vector<Tensor> clean = generated_eval_set(c);
  const double max_budget = *std::max_element(e.budgets.begin(), e.budgets.end());
  log().info("reproduce: {} evaluation images, edits at t* = {}", clean.size(), e.t_star);

  auto edit = [&](ModelChoice m, std::span<const Tensor> images, const std::string& label) {
    return edit_set(models, m, images, e.t_star, c.seed, label, workers);
  };

  // (a) attack asymmetry
  auto section = Clock::now();
  Table attack = attack_table();
  Table asym{{"model_kind", "budget", "fid_clean", "fid_adv", "fid_delta", "ssim_delta_mean", "ssim_delta_stderr",
              "t", "p_value", "n"},
             {}};
  std::map<ModelChoice, std::vector<Tensor>> clean_edit;
  std::map<ModelChoice, MetricReport> clean_report;
  std::map<ModelChoice, std::vector<double>> clean_ssim;
  std::vector<AttackResult> ldm_max_results;
  std::vector<double> ldm_max_ssim_delta;
  for (ModelChoice m : {ModelChoice::ldm, ModelChoice::pdm}) {
    const std::string kind(to_string(m));
    clean_edit[m] = edit(m, clean, "clean/" + kind);
    clean_report[m] = evaluate_metrics(clean, clean_edit[m], f);
    clean_ssim[m] = per_image_ssim(clean, clean_edit[m]);
  }
  for (double budget : e.budgets) {
    for (ModelChoice m : {ModelChoice::ldm, ModelChoice::pdm}) {
      const std::string kind(to_string(m));
      const LossKind loss = m == ModelChoice::ldm ? LossKind::semantic_latent : LossKind::semantic_pixel;
      auto results = attack_set(models, clean, c.attack, {loss, budget, c.seed}, workers);
      const auto adv = adv_images(results);
      const auto adv_edit = edit(m, adv, "adv/" + kind + "/" + budget_label(budget));
      const MetricReport rep = evaluate_metrics(clean, adv_edit, f);
      for (const auto& metric : e.metrics) {
        const double before = metric_of(clean_report[m], metric), after = metric_of(rep, metric);
        attack.add({kind, std::string(to_string(loss)), budget, metric, before, after, after - before});
      }
      const auto adv_ssim = per_image_ssim(clean, adv_edit);
      std::vector<double> diff(adv_ssim.size());
      for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = adv_ssim[i] - clean_ssim[m][i];
      AsymmetryRow row{m, budget, clean_report[m].frechet.value, rep.frechet.value, paired_t_test(diff)};
      asym.add({kind, budget, row.fid_clean, row.fid_adv, row.fid_adv - row.fid_clean, row.ssim.mean,
                row.ssim.stderr_, row.ssim.t, row.ssim.p_value, static_cast<double>(row.ssim.n)});
      out.asymmetry.push_back(row);
      if (m == ModelChoice::ldm && budget == max_budget) {
        ldm_max_results = std::move(results);
        ldm_max_ssim_delta = diff;
      }
      write_report(attack, dir / "attack_table");
      write_report(asym, dir / "asymmetry");
    }
  }

  out.asymmetry_seconds = seconds_since(section);

  // (d) latent amplification of successful LDM attacks at the largest budget
  {
    Table values{{"image", "amplification", "success"}, {}};
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const Tensor x = clean[i].reshaped({1, 3, c.dataset.size, c.dataset.size});
      const Tensor xa = ldm_max_results[i].x_adv.reshaped(x.shape());
      const double amp = latent_amplification(models.need_ldm().autoencoder, x, xa);
      const bool success = ldm_max_ssim_delta[i] < 0.0;
      values.add({static_cast<double>(i), amp, success ? 1.0 : 0.0});
      if (success) out.amplification.push_back(amp);
    }
    out.amplification_median = median(out.amplification);
    const Histogram h = histogram(out.amplification, e.histogram_bins);
    Table hist{{"bin_low", "bin_high", "count"}, {}};
    for (std::size_t k = 0; k < h.counts.size(); ++k)
      hist.add({h.edges[k], h.edges[k + 1], static_cast<double>(h.counts[k])});
    write_report(values, dir / "amplification_values");
    write_report(hist, dir / "amplification_histogram");
  }

  // (b) purification at the largest budget, edits by the LDM
  section = Clock::now();
  Table purify = purify_table();
  out.fid_before = clean_report[ModelChoice::ldm].frechet.value;
  std::map<LossKind, std::vector<Tensor>> protected_sets;
  std::vector<LossKind> attacks = e.purify_attacks;
  if (std::find(attacks.begin(), attacks.end(), e.ablation_attack) == attacks.end())
    attacks.push_back(e.ablation_attack);
  for (LossKind loss : attacks) {
    const std::string name(to_string(loss));
    std::vector<Tensor> adv = loss == LossKind::semantic_latent && !ldm_max_results.empty()
                                  ? adv_images(ldm_max_results)
                                  : adv_images(attack_set(models, clean, c.attack, {loss, max_budget, c.seed}, workers));
    const bool in_table = std::find(e.purify_attacks.begin(), e.purify_attacks.end(), loss) != e.purify_attacks.end();
    if (in_table) {
      const double after = frechet_feature_distance(clean, edit(ModelChoice::ldm, adv, "protect/" + name), f);
      out.fid_after[loss] = after;
      purify.add({name, std::string("before_protection"), std::string("fid"), out.fid_before});
      purify.add({name, std::string("after_protection"), std::string("fid"), after});
      for (PurifyMethod p : e.purifiers) {
        const std::string label = "pure/" + name + "/" + std::string(to_string(p));
        PurifyConfig pc = c.purify.purify;
        pc.method = p;
        const auto pure = purify_set(models, adv, pc, c.seed, label, workers);
        const double fid = frechet_feature_distance(clean, edit(ModelChoice::ldm, pure, label), f);
        out.fid_purified[loss][p] = fid;
        purify.add({name, std::string(to_string(p)), std::string("fid"), fid});
      }
      write_report(purify, dir / "purify_table");
    }
    protected_sets[loss] = std::move(adv);
  }
  out.purification_seconds = seconds_since(section);

  // (c) t* ablation of pdm_pure
  {
    Table ablation{{"attack", "purifier", "t_star", "fid", "residual_delta"}, {}};
    const std::string name(to_string(e.ablation_attack));
    for (int t : e.ablation_t_stars) {
      const std::string label = "ablation/" + name + "/" + std::to_string(t);
      PurifyConfig pc = c.purify.purify;
      pc.method = PurifyMethod::pdm_pure;
      pc.t_star = t;
      const auto pure = purify_set(models, protected_sets.at(e.ablation_attack), pc, c.seed, label, workers);
      const double fid = frechet_feature_distance(clean, edit(ModelChoice::ldm, pure, label), f);
      out.ablation.emplace_back(t, fid);
      ablation.add({name, std::string("pdm_pure"), static_cast<double>(t), fid, fid - out.fid_before});
    }
    write_report(ablation, dir / "ablation");
  }

  ordered summary;
  summary["eval_count"] = clean.size();
  summary["edit_t_star"] = e.t_star;
  summary["amplification_median"] = format_number(out.amplification_median);
  summary["amplification_successes"] = out.amplification.size();
  write_json(dir / "summary.json", summary);

  const double elapsed = seconds_since(start);
  log().info("reproduce: done in {:.0f} s -> {}", elapsed, dir.string());
  if (elapsed > 3600.0) log().warn("reproduce: took {:.0f} s, over the 1 h budget", elapsed);
  return out;
}

// ---------------------------------------------------------------------------
// gradcheck

bool cmd_gradcheck(const ExperimentConfig& c, int networks, double tolerance) {
  const auto start = Clock::now();
  const auto cases = random_network_gradchecks(c.seed, networks);
  Table t{{"network", "parameters", "max_relative_error", "passed"}, {}};
  bool ok = true;
  for (const auto& k : cases) {
    const bool pass = k.max_relative_error <= tolerance;
    ok = ok && pass;
    t.add({k.name, static_cast<double>(k.parameters), k.max_relative_error, std::string(pass ? "yes" : "no")});
    log().info("gradcheck {}: {} parameters, max relative error {:.3e}{}", k.name, k.parameters,
               k.max_relative_error, pass ? "" : " FAILED");
  }
  write_report(t, c.output / "gradcheck" / "report");
  log().info("gradcheck: {} networks in {:.1f} s", cases.size(), seconds_since(start));
  return ok;
}

}  // namespace dadt::cli
