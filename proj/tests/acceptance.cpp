// Acceptance runner: one PASS/FAIL line per criterion. Criteria 4-7, 10 and
// 11 train the acceptance profile once and keep the checkpoints in --cache.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "dadt/attacks.hpp"
#include "dadt/cli/commands.hpp"
#include "dadt/cli/config.hpp"
#include "dadt/cli/experiment.hpp"
#include "dadt/data_io.hpp"
#include "dadt/diffusion.hpp"
#include "dadt/metrics.hpp"
#include "dadt/models.hpp"
#include "dadt/purify.hpp"

using namespace dadt;
using namespace dadt::cli;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// standalone criteria

Outcome gradients() {
  const auto start = Clock::now();
  const auto cases = random_network_gradchecks(2024, 20);
  const double secs = seconds_since(start);
  double worst = 0.0;
  std::size_t largest = 0;
  for (const auto& k : cases) {
    worst = std::max(worst, k.max_relative_error);
    largest = std::max(largest, k.parameters);
  }
  const bool pass = cases.size() >= 20 && worst <= 1e-4 && largest <= 10'000 && secs < 60.0;
  return {pass, fmt("%zu networks (largest %zu params), max rel err %.2e, %.1f s", cases.size(), largest, worst, secs)};
}

Outcome diffusion_invariants() {
  const auto start = Clock::now();
  const NoiseSchedule s = default_schedule();
  bool monotone = true;
  for (int t = 2; t <= s.steps; ++t)
    monotone = monotone && s.beta(t) > s.beta(t - 1) && s.alpha_bar(t) < s.alpha_bar(t - 1);
  for (int t = 1; t <= s.steps; ++t) monotone = monotone && s.beta(t) > 0.0 && s.beta(t) < 1.0;
  const double abar_T = s.alpha_bar(s.steps);

  // Var[x_t | x0] = 1 - abar_t, E[x_t | x0] = sqrt(abar_t) x0.
  Rng rng(17);
  double worst_var = 0.0;
  bool mean_ok = true;
  const double x0 = 0.6;
  for (int t : {1, 5, 25, 50, 100}) {
    const int n = 10'000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double v = q_sample(Tensor({1}, x0), t, rng.normal_tensor({1}), s)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n, var = (sq - n * mean * mean) / (n - 1);
    const double expected = 1.0 - s.alpha_bar(t);
    worst_var = std::max(worst_var, std::abs(var / expected - 1.0));
    mean_ok = mean_ok && std::abs(mean - std::sqrt(s.alpha_bar(t)) * x0) <= 5.0 * std::sqrt(expected / n);
  }

  UNetConfig u;
  u.channels = 3;
  u.height = u.width = 8;
  u.widths = {4, 8};
  u.res_blocks = 1;
  u.time_dim = 8;
  u.groups = 2;
  Rng init(3);
  const DenoiserModel m(u, s, init);
  const Tensor x = Rng(4).uniform_tensor({1, 3, 8, 8}, 0, 1);
  Rng r(5);
  const bool identity = sdedit(m, x, 0, s, r) == x && sdedit(m, x, EditConfig{0, 9}, s) == x;

  const double secs = seconds_since(start);
  const bool pass = monotone && abar_T < 0.01 && worst_var <= 0.05 && mean_ok && identity && secs < 120.0;
  return {pass, fmt("monotone %s, abar_T %.4f, variance rel err %.3f, mean %s, sdedit(0) identity %s, %.1f s",
                    monotone ? "yes" : "no", abar_T, worst_var, mean_ok ? "ok" : "off", identity ? "yes" : "no",
                    secs)};
}

Outcome pgd_ball() {
  Rng meta(31337);
  int violations = 0;
  const int configs = 1000;
  for (int k = 0; k < configs; ++k) {
    const std::size_t c = static_cast<std::size_t>(meta.uniform_int(1, 3));
    const std::size_t h = static_cast<std::size_t>(meta.uniform_int(1, 8));
    const std::size_t w = static_cast<std::size_t>(meta.uniform_int(1, 8));
    Tensor x0 = meta.uniform_tensor({1, c, h, w}, 0.0, 1.0);
    // Saturated pixels exercise the range projection.
    for (auto& v : x0.data())
      if (meta.uniform() < 0.2) v = meta.uniform() < 0.5 ? 0.0 : 1.0;
    AttackConfig cfg;
    const int budget_kind = static_cast<int>(meta.uniform_int(0, 3));
    cfg.budget = budget_kind == 0 ? 0.0 : budget_kind == 1 ? meta.uniform_int(1, 32) / 255.0 : 0.5 * meta.uniform();
    cfg.step = cfg.budget > 0.0 ? cfg.budget * (0.01 + 0.99 * meta.uniform()) : 1.0 / 255.0;
    cfg.iterations = static_cast<int>(meta.uniform_int(1, 20));
    const LossKind kinds[] = {LossKind::semantic_latent, LossKind::textural, LossKind::mist, LossKind::ita};
    cfg.loss = kinds[meta.uniform_int(0, 3)];
    if (needs_target(cfg.loss)) cfg.target = meta.uniform_tensor({1, c, h, w}, 0.0, 1.0);
    cfg.seed = meta.next_u64();
    const double scale = std::pow(10.0, meta.uniform_int(-6, 3));
    const auto loss = [scale](const Tensor& x, Rng& r) {
      return LossValue{0.0, scaled(r.normal_tensor(x.shape()), scale)};
    };
    const AttackResult res = pgd_attack(x0, loss, cfg);
    bool ok = max_abs_diff(res.x_adv, x0) <= cfg.budget + 1e-12 && res.linf <= cfg.budget + 1e-12;
    for (double v : res.x_adv.data()) ok = ok && v >= 0.0 && v <= 1.0;
    if (!ok) ++violations;
  }
  return {violations == 0, fmt("%d random configs, %d violations", configs, violations)};
}

Outcome metric_oracles() {
  Rng r(8);
  const std::size_t n = 10'000;
  double worst = 0.0;
  // (mu, sigma) against N(0, 1): d = mu^2 + (1 - sigma)^2.
  for (auto [mu, sigma] : {std::pair{0.0, 1.0}, {1.0, 1.0}, {0.0, 2.0}, {-0.5, 0.5}, {2.0, 3.0}}) {
    Tensor a({n, 1}), b({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = r.normal();
      b[i] = mu + sigma * r.normal();
    }
    const double expected = mu * mu + (1.0 - sigma) * (1.0 - sigma);
    worst = std::max(worst, std::abs(frechet_distance(a, b) - expected));
  }
  double ssim_err = 0.0;
  for (int k = 0; k < 5; ++k) {
    const Tensor img = r.uniform_tensor({3, 32, 32}, 0, 1);
    ssim_err = std::max(ssim_err, std::abs(ssim(img, img) - 1.0));
  }
  AutoencoderConfig ac;
  ac.height = ac.width = 32;
  Rng init(9);
  const Featurizer f{Autoencoder(ac, init)};
  std::vector<Tensor> set;
  for (std::size_t k = 0; k <= f.dim() + 4; ++k) set.push_back(r.uniform_tensor({3, 32, 32}, 0, 1));
  const double same = frechet_feature_distance(set, set, f);
  const bool pass = worst <= 0.1 && ssim_err <= 1e-9 && std::abs(same) <= 1e-6;
  return {pass, fmt("1-D Frechet max err %.4f, SSIM self err %.1e, identical-set FID-lite %.1e", worst, ssim_err,
                    same)};
}

Outcome grid_tiling() {
  const NoiseSchedule s = default_schedule();
  UNetConfig u;
  u.channels = 3;
  u.height = u.width = 16;
  u.widths = {8, 16};
  u.res_blocks = 1;
  u.time_dim = 8;
  u.groups = 2;
  Rng init(12);
  const DenoiserModel pdm(u, s, init);
  const Tensor x = Rng(13).uniform_tensor({3, 16, 16}, 0, 1);
  PurifyConfig c;
  c.method = PurifyMethod::grid_pure;
  c.grid_cell = 8;
  c.grid_window = 16;
  c.t_star = 10;
  c.seed = 77;
  const GridPureResult g = grid_pure_detailed(pdm, x, c);
  Rng shared = purify_rng(c, 0);
  const Tensor reference =
      clamped(sdedit(pdm, x.reshaped({1, 3, 16, 16}), c.t_star, s, shared), 0.0, 1.0).reshaped(x.shape());
  const bool exact = g.windows == 1 && g.image == reference && g.image == pdm_pure(pdm, x, c);
  const std::size_t count = grid_windows(32, 32, 8, 16).size();
  return {exact && count == 10,
          fmt("single window == sdedit bit-exact: %s, 32x32 cell 8 windows: %zu", exact ? "yes" : "no", count)};
}

// ---------------------------------------------------------------------------
// experiment criteria

json acceptance_profile(const fs::path& out) {
  return {
      {"schema_version", 1},
      {"seed", 1},
      {"workers", 1},
      {"output", {{"directory", out.string()}}},
      {"dataset", {{"count", 2000}}},
      {"models",
       {{"pdm", {{"widths", {16, 32}}, {"res_blocks", 1}, {"time_dim", 32}, {"epochs", 40}}},
        {"autoencoder", {{"epochs", 30}}},
        {"ldm", {{"epochs", 40}}}}},
      {"attack", {{"iterations", 100}}},
      {"evaluation",
       {{"eval_count", 200},
        {"budgets", {"16/255"}},
        {"purify_attacks", {"semantic_latent", "textural", "mist"}},
        {"ablation_t_stars", {1, 10, 20}},
        {"ablation_attack", "mist"}}},
  };
}

// The part of the profile the checkpoints depend on.
std::string training_key(const json& doc) {
  json k = json::object();
  for (const char* key : {"seed", "dataset", "models"})
    if (doc.contains(key)) k[key] = doc[key];
  return k.dump();
}

void ensure_trained(const json& doc, const fs::path& run) {
  const fs::path stamp = run / "profile.json";
  const ExperimentConfig c = parse_config(doc);
  bool fresh = false;
  if (fs::exists(stamp)) {
    std::ifstream in(stamp);
    std::stringstream ss;
    ss << in.rdbuf();
    fresh = ss.str() == training_key(doc);
    for (const auto& p : {c.models.pdm.checkpoint, c.models.autoencoder.checkpoint, c.models.ldm.checkpoint})
      fresh = fresh && fs::exists(c.resolve(p));
  }
  if (fresh) {
    std::printf("  using cached checkpoints in %s\n", run.string().c_str());
    return;
  }
  std::printf("  training the acceptance profile into %s\n", run.string().c_str());
  std::fflush(stdout);
  const auto start = Clock::now();
  const TrainSummary t = cmd_train(c);
  std::printf("  trained in %.0f s, autoencoder holdout MAE %.4f (%s)\n", seconds_since(start),
              t.autoencoder.holdout_mae, t.autoencoder.passed ? "within threshold" : "above threshold");
  std::ofstream(stamp) << training_key(doc);
}

double recovery(double before, double after, double purified) {
  const double attack_delta = after - before;
  return attack_delta > 0.0 ? (after - purified) / attack_delta : std::nan("");
}

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

Outcome determinism(const json& profile, const fs::path& trained) {
  json doc = profile;
  doc["output"]["directory"] = (trained.parent_path() / "determinism").string();
  doc["evaluation"]["eval_count"] = 65;
  doc["evaluation"]["purify_attacks"] = {"mist"};
  doc["attack"]["iterations"] = 5;
  const ExperimentConfig c = parse_config(doc);
  fs::remove_all(c.output);
  fs::create_directories(c.output);
  fs::copy(trained / "checkpoints", c.output / "checkpoints");
  const fs::path bundle = c.output / "reproduce", first = c.output / "reproduce_first";
  cmd_reproduce(c);
  fs::rename(bundle, first);
  cmd_reproduce(c);
  const auto a = tree(first), b = tree(bundle);
  std::size_t differing = 0;
  for (const auto& [name, content] : a)
    if (!b.contains(name) || b.at(name) != content) ++differing;
  const bool pass = !a.empty() && a.size() == b.size() && differing == 0;
  return {pass, fmt("%zu files per bundle, %zu differ", a.size(), differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path cache = "acceptance_cache";
  std::set<int> only;
  app.add_option("--cache", cache, "directory for trained checkpoints and reports");
  app.add_option("--criteria", only, "run only these criteria")->delimiter(',')->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int k) { return only.empty() || only.contains(k); };
  std::map<int, Outcome> results;
  const std::map<int, std::string> titles{
      {1, "gradient correctness"},   {2, "diffusion invariants"},    {3, "PGD ball invariant"},
      {4, "attack asymmetry"},       {5, "encoder amplification"},   {6, "purification recovery"},
      {7, "purifier ordering"},      {8, "metric oracles"},          {9, "grid tiling"},
      {10, "determinism"},           {11, "t* ablation"},
  };
  auto run = [&](int k, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    try {
      results[k] = fn();
    } catch (const std::exception& e) {
      results[k] = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %2d %s: %s (%s)\n", k, results[k].pass ? "PASS" : "FAIL", titles.at(k).c_str(),
                results[k].detail.c_str());
    std::fflush(stdout);
  };

  run(1, gradients);
  run(2, diffusion_invariants);
  run(3, pgd_ball);
  run(8, metric_oracles);
  run(9, grid_tiling);

  const bool experiments = wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(10) || wanted(11);
  if (experiments) {
    const fs::path out = fs::absolute(cache) / "run";
    const json profile = acceptance_profile(out);
    std::optional<ReproduceResult> r;
    std::string failure;
    try {
      ensure_trained(profile, out);
      if (wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(11)) {
        const auto start = Clock::now();
        r = cmd_reproduce(parse_config(profile));
        std::printf("  reproduce finished in %.0f s (asymmetry %.0f s, purification %.0f s)\n", seconds_since(start),
                    r->asymmetry_seconds, r->purification_seconds);
      }
    } catch (const std::exception& e) {
      failure = std::string("error: ") + e.what();
    }
    auto with_result = [&](const std::function<Outcome(const ReproduceResult&)>& fn) {
      return [&, fn] { return r ? fn(*r) : Outcome{false, failure}; };
    };

    run(4, with_result([](const ReproduceResult& r) {
      const AsymmetryRow *ldm = nullptr, *pdm = nullptr;
      for (const auto& row : r.asymmetry)
        if (std::abs(row.budget - 16.0 / 255.0) < 1e-12) (row.model == ModelChoice::ldm ? ldm : pdm) = &row;
      if (!ldm || !pdm) return Outcome{false, "no 16/255 rows"};
      const double dl = ldm->fid_adv - ldm->fid_clean, dp = pdm->fid_adv - pdm->fid_clean;
      const bool ratio = dl > 0.0 && dl >= 5.0 * dp;
      const bool tests = pdm->ssim.p_value >= 0.05 && ldm->ssim.p_value < 0.05;
      const bool time = r.asymmetry_seconds <= 1200.0;
      return Outcome{ratio && tests && time,
                     fmt("LDM dFID %.4f, PDM dFID %.4f; SSIM delta LDM %.4f (p %.3g), PDM %.4f (p %.3g); %.0f s", dl,
                         dp, ldm->ssim.mean, ldm->ssim.p_value, pdm->ssim.mean, pdm->ssim.p_value,
                         r.asymmetry_seconds)};
    }));

    run(5, with_result([](const ReproduceResult& r) {
      const Histogram h = histogram(r.amplification, 20);
      for (std::size_t k = 0; k < h.counts.size(); ++k)
        std::printf("  amplification [%8.3f, %8.3f): %zu\n", h.edges[k], h.edges[k + 1], h.counts[k]);
      const bool pass = !r.amplification.empty() && r.amplification_median > 1.0;
      return Outcome{pass, fmt("%zu successful attacks, median amplification %.3f", r.amplification.size(),
                               r.amplification_median)};
    }));

    run(6, with_result([](const ReproduceResult& r) {
      bool pass = r.purification_seconds <= 900.0;
      std::string detail;
      for (LossKind loss : {LossKind::semantic_latent, LossKind::textural, LossKind::mist}) {
        const double after = r.fid_after.at(loss);
        const auto& p = r.fid_purified.at(loss);
        const double pdm = recovery(r.fid_before, after, p.at(PurifyMethod::pdm_pure));
        const double ldm = recovery(r.fid_before, after, p.at(PurifyMethod::ldm_pure));
        pass = pass && pdm >= 0.6 && ldm < pdm;
        detail += fmt("%s pdm %.0f%% ldm %.0f%%; ", std::string(to_string(loss)).c_str(), 100 * pdm, 100 * ldm);
      }
      return Outcome{pass, detail + fmt("%.0f s", r.purification_seconds)};
    }));

    run(7, with_result([](const ReproduceResult& r) {
      int ordered = 0;
      std::string detail;
      for (LossKind loss : {LossKind::semantic_latent, LossKind::textural, LossKind::mist}) {
        const auto& p = r.fid_purified.at(loss);
        const double worst = std::max({p.at(PurifyMethod::jpeg_dct), p.at(PurifyMethod::crop_resize),
                                       p.at(PurifyMethod::highfreq_filter)});
        const double pdm = p.at(PurifyMethod::pdm_pure), grid = p.at(PurifyMethod::grid_pure);
        const bool ok = pdm <= grid && grid <= worst;
        ordered += ok;
        detail += fmt("%s %.3f/%.3f/%.3f%s; ", std::string(to_string(loss)).c_str(), pdm, grid, worst,
                      ok ? "" : " x");
      }
      return Outcome{ordered >= 2, detail + fmt("%d of 3 ordered (pdm/grid/worst baseline)", ordered)};
    }));

    run(10, [&] { return determinism(profile, out); });

    run(11, with_result([](const ReproduceResult& r) {
      std::map<int, double> residual;
      for (const auto& [t, fid] : r.ablation) residual[t] = fid - r.fid_before;
      if (r.ablation.size() != 3 || !residual.contains(1) || !residual.contains(10))
        return Outcome{false, fmt("%zu ablation rows", r.ablation.size())};
      const bool pass = residual[1] > 0.0 && residual[1] >= 2.0 * residual[10];
      return Outcome{pass, fmt("residual dFID t*=1 %.4f, t*=10 %.4f, t*=20 %.4f", residual[1], residual[10],
                               residual.contains(20) ? residual[20] : std::nan(""))};
    }));
  }

  int failed = 0;
  for (const auto& [k, o] : results) failed += !o.pass;
  std::printf("%zu criteria run, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}
