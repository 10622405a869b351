#include "dadt/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <thread>

#include "dadt/errors.hpp"

namespace dadt::cli {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

/// Read-only view of one JSON object that knows its dotted path.
class Node {
 public:
  Node(const json* value, std::string path) : value_(value), path_(std::move(path)) {}

  bool present() const { return value_ != nullptr; }
  const std::string& path() const { return path_; }

  void allow(std::initializer_list<const char*> keys) const {
    if (!value_) return;
    if (!value_->is_object()) throw ConfigError(path_ + ": expected an object");
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : value_->items())
      if (!allowed.count(k)) throw ConfigError("unknown key '" + join(path_, k) + "'");
  }

  Node child(const char* key) const {
    if (!value_) return {nullptr, join(path_, key)};
    auto it = value_->find(key);
    return {it == value_->end() ? nullptr : &*it, join(path_, key)};
  }

  const json* find(const char* key) const {
    if (!value_) return nullptr;
    auto it = value_->find(key);
    return it == value_->end() ? nullptr : &*it;
  }

  void get(const char* key, int& out) const {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw type_error(key, "an integer");
      const auto wide = v->get<std::int64_t>();
      if (wide < INT32_MIN || wide > INT32_MAX) throw ConfigError(join(path_, key) + ": out of range");
      out = static_cast<int>(wide);
    }
  }
  void get(const char* key, std::size_t& out) const {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        throw type_error(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, double& out) const {
    if (const json* v = find(key)) out = real(*v, join(path_, key));
  }
  void get(const char* key, bool& out) const {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw type_error(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) const {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw type_error(key, "a string");
      out = v->get<std::string>();
    }
  }

  template <class T, class F>
  void get_list(const char* key, std::vector<T>& out, F convert) const {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array()) throw type_error(key, "an array");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i)
      out.push_back(convert((*v)[i], join(path_, key) + "[" + std::to_string(i) + "]"));
  }

  static double real(const json& v, const std::string& where) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      try {
        return parse_fraction(v.get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
    throw ConfigError(where + ": expected a number or an \"a/b\" string");
  }

 private:
  ConfigError type_error(const char* key, const char* expected) const {
    return ConfigError(join(path_, key) + ": expected " + expected);
  }

  const json* value_;
  std::string path_;
};

std::string as_string(const json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + ": expected a string");
  return v.get<std::string>();
}

std::size_t as_size(const json& v, const std::string& where) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1) throw ConfigError(where + ": expected a positive integer");
  return v.get<std::size_t>();
}

int as_int(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
  return v.get<int>();
}

template <class F>
auto with_path(const std::string& where, F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

ModelChoice parse_model_choice(const std::string& s, const std::string& where) {
  if (s == "ldm") return ModelChoice::ldm;
  if (s == "pdm") return ModelChoice::pdm;
  throw ConfigError(where + ": expected \"ldm\" or \"pdm\", got \"" + s + "\"");
}

void read_unet(const Node& n, DenoiserSection& d) {
  n.allow({"widths", "res_blocks", "time_dim", "groups", "epochs", "batch", "lr", "clip_norm", "checkpoint"});
  n.get_list("widths", d.unet.widths, as_size);
  n.get("res_blocks", d.unet.res_blocks);
  n.get("time_dim", d.unet.time_dim);
  n.get("groups", d.unet.groups);
  n.get("epochs", d.epochs);
  n.get("batch", d.batch);
  n.get("lr", d.lr);
  n.get("clip_norm", d.clip_norm);
  n.get("checkpoint", d.checkpoint);
}

void check_training(const std::string& path, int epochs, int batch, double lr, double clip) {
  if (epochs < 0) throw ConfigError(path + ".epochs: must be >= 0");
  if (batch < 1) throw ConfigError(path + ".batch: must be >= 1");
  if (!(lr > 0.0)) throw ConfigError(path + ".lr: must be > 0");
  if (!(clip > 0.0)) throw ConfigError(path + ".clip_norm: must be > 0");
}

void read_dataset(const Node& n, ExperimentConfig& c) {
  if (!n.present()) throw ConfigError("missing required section 'dataset'");
  n.allow({"size", "count", "noise", "seed", "classes"});
  c.dataset.seed = c.seed;
  n.get("size", c.dataset.size);
  n.get("count", c.dataset.count);
  n.get("noise", c.dataset.noise);
  n.get("seed", c.dataset.seed);
  n.get_list("classes", c.dataset.classes, [](const json& v, const std::string& where) {
    return with_path(where, [&] { return parse_shape_class(as_string(v, where)); });
  });
  with_path("dataset", [&] {
    validate(c.dataset);
    return 0;
  });
}

void read_models(const Node& n, ExperimentConfig& c) {
  n.allow({"schedule", "pdm", "autoencoder", "ldm"});
  auto& m = c.models;

  const Node s = n.child("schedule");
  s.allow({"steps", "beta_start", "beta_end"});
  s.get("steps", m.schedule.steps);
  s.get("beta_start", m.schedule.beta_start);
  s.get("beta_end", m.schedule.beta_end);
  if (m.schedule.steps < 1) throw ConfigError("models.schedule.steps: must be >= 1");
  if (!(m.schedule.beta_start > 0.0 && m.schedule.beta_start <= m.schedule.beta_end && m.schedule.beta_end < 1.0))
    throw ConfigError("models.schedule: need 0 < beta_start <= beta_end < 1");

  read_unet(n.child("pdm"), m.pdm);
  m.pdm.unet.channels = 3;
  m.pdm.unet.height = m.pdm.unet.width = c.dataset.size;
  with_path("models.pdm", [&] {
    validate(m.pdm.unet);
    return 0;
  });
  check_training("models.pdm", m.pdm.epochs, m.pdm.batch, m.pdm.lr, m.pdm.clip_norm);

  const Node a = n.child("autoencoder");
  a.allow({"latent_channels", "stem_width", "widths", "epochs", "batch", "lr", "clip_norm", "mae_threshold",
           "holdout", "checkpoint"});
  auto& ae = m.autoencoder;
  a.get("latent_channels", ae.ae.latent_channels);
  a.get("stem_width", ae.ae.stem_width);
  a.get_list("widths", ae.ae.widths, as_size);
  a.get("epochs", ae.train.epochs);
  a.get("batch", ae.train.batch);
  a.get("lr", ae.train.lr);
  a.get("clip_norm", ae.train.clip_norm);
  a.get("mae_threshold", ae.train.mae_threshold);
  a.get("holdout", ae.holdout);
  a.get("checkpoint", ae.checkpoint);
  ae.ae.channels = 3;
  ae.ae.height = ae.ae.width = c.dataset.size;
  with_path("models.autoencoder", [&] {
    validate(ae.ae);
    return 0;
  });
  check_training("models.autoencoder", ae.train.epochs, ae.train.batch, ae.train.lr, ae.train.clip_norm);
  if (!(ae.train.mae_threshold > 0.0)) throw ConfigError("models.autoencoder.mae_threshold: must be > 0");

  read_unet(n.child("ldm"), m.ldm);
  const Shape latent = ae.ae.latent_shape();
  m.ldm.unet.channels = latent[0];
  m.ldm.unet.height = latent[1];
  m.ldm.unet.width = latent[2];
  with_path("models.ldm", [&] {
    validate(m.ldm.unet);
    return 0;
  });
  check_training("models.ldm", m.ldm.epochs, m.ldm.batch, m.ldm.lr, m.ldm.clip_norm);
}

void read_attack(const Node& n, ExperimentConfig& c) {
  n.allow({"loss", "model", "budget", "budgets", "step", "iterations", "mc_samples", "mist_weight",
           "end_to_end_t_star", "target", "target_period", "input"});
  auto& a = c.attack;
  std::string loss(to_string(a.loss));
  n.get("loss", loss);
  a.loss = with_path("attack.loss", [&] { return parse_loss_kind(loss); });
  a.model = a.loss == LossKind::semantic_pixel ? ModelChoice::pdm : ModelChoice::ldm;
  std::string model(to_string(a.model));
  n.get("model", model);
  a.model = parse_model_choice(model, "attack.model");
  if (n.find("budget") && n.find("budgets")) throw ConfigError("attack: give either 'budget' or 'budgets'");
  if (const json* b = n.find("budget")) a.budgets = {Node::real(*b, "attack.budget")};
  n.get_list("budgets", a.budgets, Node::real);
  if (a.budgets.empty()) throw ConfigError("attack.budgets: must not be empty");
  n.get("step", a.step);
  n.get("iterations", a.iterations);
  n.get("mc_samples", a.mc_samples);
  n.get("mist_weight", a.mist_weight);
  n.get("end_to_end_t_star", a.end_to_end_t_star);
  std::string target = a.target == TargetKind::gray ? "gray" : "checkerboard";
  if (a.loss == LossKind::end_to_end) target = "gray";
  n.get("target", target);
  if (target == "gray") a.target = TargetKind::gray;
  else if (target == "checkerboard") a.target = TargetKind::checkerboard;
  else throw ConfigError("attack.target: expected \"checkerboard\" or \"gray\", got \"" + target + "\"");
  n.get("target_period", a.target_period);
  if (a.target_period < 2 || a.target_period % 2) throw ConfigError("attack.target_period: must be an even number >= 2");
  n.get("input", a.input);

  if (a.loss == LossKind::semantic_pixel && a.model != ModelChoice::pdm)
    throw ConfigError("attack.model: semantic_pixel attacks the pdm");
  if ((a.loss == LossKind::semantic_latent || a.loss == LossKind::textural || a.loss == LossKind::mist ||
       a.loss == LossKind::ita) &&
      a.model != ModelChoice::ldm)
    throw ConfigError("attack.model: " + std::string(to_string(a.loss)) + " needs the ldm");
  for (std::size_t i = 0; i < a.budgets.size(); ++i) {
    AttackConfig probe;
    probe.budget = a.budgets[i];
    probe.step = a.step;
    probe.iterations = a.iterations;
    probe.loss = a.loss;
    probe.mc_samples = a.mc_samples;
    probe.mist_weight = a.mist_weight;
    probe.end_to_end_t_star = a.end_to_end_t_star;
    if (needs_target(a.loss)) probe.target = Tensor({3, 1, 1}, 0.5);
    with_path("attack.budgets[" + std::to_string(i) + "]", [&] {
      validate(probe);
      return 0;
    });
  }
}

void read_edit(const Node& n, ExperimentConfig& c) {
  n.allow({"t_star", "model", "input"});
  n.get("t_star", c.edit.t_star);
  std::string model(to_string(c.edit.model));
  n.get("model", model);
  c.edit.model = parse_model_choice(model, "edit.model");
  n.get("input", c.edit.input);
  with_path("edit", [&] {
    validate(EditConfig{.t_star = c.edit.t_star}, c.schedule());
    return 0;
  });
}

void read_purify(const Node& n, ExperimentConfig& c) {
  n.allow({"method", "t_star", "grid_cell", "grid_window", "jpeg_quality", "crop_fraction", "resample_factor",
           "filter_radius", "filter_eps", "input"});
  auto& p = c.purify.purify;
  std::string method(to_string(p.method));
  n.get("method", method);
  p.method = with_path("purify.method", [&] { return parse_purify_method(method); });
  n.get("t_star", p.t_star);
  n.get("grid_cell", p.grid_cell);
  n.get("grid_window", p.grid_window);
  n.get("jpeg_quality", p.jpeg_quality);
  n.get("crop_fraction", p.crop_fraction);
  n.get("resample_factor", p.resample_factor);
  n.get("filter_radius", p.filter_radius);
  n.get("filter_eps", p.filter_eps);
  n.get("input", c.purify.input);
  // Every purifier is checked, not only the selected one: reproduce runs them all.
  for (PurifyMethod m : {PurifyMethod::pdm_pure, PurifyMethod::grid_pure, PurifyMethod::ldm_pure,
                         PurifyMethod::jpeg_dct, PurifyMethod::crop_resize, PurifyMethod::highfreq_filter}) {
    PurifyConfig probe = p;
    probe.method = m;
    with_path("purify", [&] {
      validate(probe, c.models.schedule.steps);
      return 0;
    });
  }
  const auto window = static_cast<std::size_t>(p.grid_window);
  const std::size_t size = c.dataset.size;
  const std::size_t levels = c.models.pdm.unet.widths.size();
  const std::size_t multiple = std::size_t{1} << (levels - 1);
  if (window > size) throw ConfigError("purify.grid_window: larger than the image");
  if (window % multiple) throw ConfigError("purify.grid_window: must be divisible by " + std::to_string(multiple));
  if (p.resample_factor > 1 && (size % static_cast<std::size_t>(p.resample_factor) ||
                                (size / static_cast<std::size_t>(p.resample_factor)) % multiple))
    throw ConfigError("purify.resample_factor: downsampled extent must stay divisible by " +
                      std::to_string(multiple));
}

void read_evaluation(const Node& n, ExperimentConfig& c) {
  n.allow({"metrics", "eval_count", "t_star", "reference", "candidates", "budgets", "purify_attacks", "purifiers",
           "ablation_t_stars", "ablation_attack", "histogram_bins", "alpha"});
  auto& e = c.evaluation;
  n.get_list("metrics", e.metrics, as_string);
  static const std::set<std::string> known{"fid", "ssim", "psnr", "perceptual", "cosine"};
  for (const auto& m : e.metrics)
    if (!known.count(m)) throw ConfigError("evaluation.metrics: unknown metric \"" + m + "\"");
  n.get("eval_count", e.eval_count);
  n.get("t_star", e.t_star);
  n.get("reference", e.reference);
  n.get_list("candidates", e.candidates, as_string);
  n.get_list("budgets", e.budgets, Node::real);
  n.get_list("purify_attacks", e.purify_attacks, [](const json& v, const std::string& where) {
    return with_path(where, [&] { return parse_loss_kind(as_string(v, where)); });
  });
  n.get_list("purifiers", e.purifiers, [](const json& v, const std::string& where) {
    return with_path(where, [&] { return parse_purify_method(as_string(v, where)); });
  });
  n.get_list("ablation_t_stars", e.ablation_t_stars, as_int);
  std::string ablation(to_string(e.ablation_attack));
  n.get("ablation_attack", ablation);
  e.ablation_attack = with_path("evaluation.ablation_attack", [&] { return parse_loss_kind(ablation); });
  n.get("histogram_bins", e.histogram_bins);
  n.get("alpha", e.alpha);

  if (e.eval_count < 1) throw ConfigError("evaluation.eval_count: must be >= 1");
  const bool fid = std::find(e.metrics.begin(), e.metrics.end(), "fid") != e.metrics.end();
  const auto& ae = c.models.autoencoder.ae;
  const std::size_t dim = ae.widths.empty() ? ae.stem_width : ae.widths.back();
  if (fid && e.eval_count < dim + 1)
    throw ConfigError("evaluation.eval_count: the Frechet distance needs at least " + std::to_string(dim + 1) +
                      " images for " + std::to_string(dim) + "-dimensional features");
  with_path("evaluation", [&] {
    validate(EditConfig{.t_star = e.t_star}, c.schedule());
    return 0;
  });
  for (double b : e.budgets)
    if (!(b > 0.0 && b <= 1.0)) throw ConfigError("evaluation.budgets: each budget must lie in (0, 1]");
  if (e.budgets.empty()) throw ConfigError("evaluation.budgets: must not be empty");
  for (int t : e.ablation_t_stars)
    if (t < 1 || t > c.models.schedule.steps)
      throw ConfigError("evaluation.ablation_t_stars: each t* must lie in [1, T]");
  if (e.histogram_bins < 1) throw ConfigError("evaluation.histogram_bins: must be >= 1");
  if (!(e.alpha > 0.0 && e.alpha < 1.0)) throw ConfigError("evaluation.alpha: must lie in (0, 1)");
}

}  // namespace

std::string_view to_string(ModelChoice m) noexcept { return m == ModelChoice::ldm ? "ldm" : "pdm"; }

NoiseSchedule ExperimentConfig::schedule() const {
  return make_linear_schedule(models.schedule.steps, models.schedule.beta_start, models.schedule.beta_end);
}

std::filesystem::path ExperimentConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : output / p;
}

int ExperimentConfig::worker_count() const {
  if (workers > 0) return workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

double parse_fraction(const std::string& text) {
  auto number = [&](std::string_view s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || s.empty())
      throw ConfigError("cannot parse \"" + text + "\" as a number or fraction");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return number(text);
  const double den = number(std::string_view(text).substr(slash + 1));
  if (den == 0.0) throw ConfigError("zero denominator in \"" + text + "\"");
  return number(std::string_view(text).substr(0, slash)) / den;
}

std::uint64_t item_seed(std::uint64_t seed, std::string_view label, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(stream_id(label) + index));
}

ExperimentConfig parse_config(const json& document) {
  const Node root(&document, "");
  root.allow({"schema_version", "seed", "workers", "output", "dataset", "models", "attack", "edit", "purify",
              "evaluation"});
  ExperimentConfig c;
  c.source = document;
  if (!root.find("schema_version")) throw ConfigError("missing required key 'schema_version'");
  root.get("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion)
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  root.get("seed", c.seed);
  root.get("workers", c.workers);
  if (c.workers < 0) throw ConfigError("workers: must be >= 0");
  const Node out = root.child("output");
  out.allow({"directory"});
  std::string dir = c.output.string();
  out.get("directory", dir);
  if (dir.empty()) throw ConfigError("output.directory: must not be empty");
  c.output = dir;

  read_dataset(root.child("dataset"), c);
  read_models(root.child("models"), c);
  read_attack(root.child("attack"), c);
  read_edit(root.child("edit"), c);
  read_purify(root.child("purify"), c);
  read_evaluation(root.child("evaluation"), c);
  return c;
}

void apply_override(json& document, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got \"" + assignment + "\"");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &document;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty component in \"" + key + "\"");
    if (!node->is_object()) throw ConfigError("--set: '" + key.substr(0, start - 1) + "' is not an object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

json default_document() {
  return json{{"schema_version", kSchemaVersion}, {"dataset", json::object()}};
}

ExperimentConfig load_config(const ConfigSources& sources) {
  json doc = default_document();
  if (sources.file) {
    std::ifstream in(*sources.file);
    if (!in) throw IoError("cannot open config " + sources.file->string());
    doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + sources.file->string() + " is not valid JSON");
  }
  for (const auto& s : sources.overrides) apply_override(doc, s);
  if (sources.output) doc["output"]["directory"] = sources.output->string();
  if (sources.seed) doc["seed"] = *sources.seed;
  if (sources.workers) doc["workers"] = *sources.workers;
  return parse_config(doc);
}

}  // namespace dadt::cli
