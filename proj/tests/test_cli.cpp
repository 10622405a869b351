#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "dadt/cli/commands.hpp"
#include "dadt/cli/config.hpp"
#include "dadt/cli/experiment.hpp"
#include "dadt/data_io.hpp"
#include "dadt/errors.hpp"
#include "doctest.h"

using namespace dadt;
using namespace dadt::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dadt_cli_" + name);
  fs::remove_all(p);
  return p;
}

/// Small enough that train + reproduce take a few seconds.
json tiny_document(const fs::path& out) {
  return {
      {"schema_version", 1},
      {"seed", 5},
      {"workers", 2},
      {"output", {{"directory", out.string()}}},
      {"dataset", {{"size", 16}, {"count", 32}}},
      {"models",
       {{"schedule", {{"steps", 20}, {"beta_start", 1e-3}, {"beta_end", 0.2}}},
        {"pdm", {{"widths", {4, 8}}, {"res_blocks", 1}, {"time_dim", 8}, {"groups", 2}, {"epochs", 1}, {"batch", 8}}},
        {"autoencoder",
         {{"latent_channels", 2}, {"stem_width", 4}, {"widths", {4}}, {"epochs", 1}, {"batch", 8}, {"holdout", 8}}},
        {"ldm", {{"widths", {4, 8}}, {"res_blocks", 1}, {"time_dim", 8}, {"groups", 2}, {"epochs", 1}, {"batch", 8}}}}},
      {"attack", {{"iterations", 2}}},
      {"edit", {{"t_star", 3}}},
      {"purify", {{"t_star", 2}, {"grid_window", 8}, {"grid_cell", 4}}},
      {"evaluation", {{"eval_count", 6}, {"t_star", 3}, {"ablation_t_stars", {1, 2, 3}}}},
  };
}

std::string config_error(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  FAIL("expected ConfigError");
  return {};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

std::vector<std::uint8_t> bytes(const fs::path& p) { return read_file(p); }

/// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(DADT_EXE) + " " + args + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config: defaults and required keys") {
  const ExperimentConfig c = parse_config(default_document());
  CHECK(c.schema_version == 1);
  CHECK(c.dataset.size == 32);
  CHECK(c.attack.budgets == std::vector<double>{16.0 / 255.0});
  CHECK(c.edit.t_star == 30);
  CHECK(c.purify.purify.t_star == 10);
  CHECK(c.evaluation.ablation_t_stars == std::vector<int>{1, 10, 20});
  CHECK(c.models.ldm.unet.channels == 4);
  CHECK(c.models.ldm.unet.height == 8);

  json no_dataset = default_document();
  no_dataset.erase("dataset");
  CHECK(contains(config_error(no_dataset), "dataset"));

  json no_version = default_document();
  no_version.erase("schema_version");
  CHECK(contains(config_error(no_version), "schema_version"));

  json wrong_version = default_document();
  wrong_version["schema_version"] = 2;
  CHECK(contains(config_error(wrong_version), "schema_version"));
}

TEST_CASE("config: unknown keys and bad types name their path") {
  json doc = default_document();
  doc["attack"]["bogus"] = 1;
  CHECK(contains(config_error(doc), "attack.bogus"));

  doc = default_document();
  doc["models"]["pdm"]["widht"] = json::array({8});
  CHECK(contains(config_error(doc), "models.pdm.widht"));

  doc = default_document();
  doc["typo"] = true;
  CHECK(contains(config_error(doc), "typo"));

  doc = default_document();
  doc["attack"]["iterations"] = 2.5;
  CHECK(contains(config_error(doc), "attack.iterations"));

  doc = default_document();
  doc["evaluation"]["purifiers"] = json::array({"pdm_pure", "magic"});
  CHECK(contains(config_error(doc), "evaluation.purifiers[1]"));

  doc = default_document();
  doc["edit"]["t_star"] = 101;
  CHECK(contains(config_error(doc), "edit"));

  doc = default_document();
  doc["evaluation"]["eval_count"] = 10;
  CHECK(contains(config_error(doc), "at least 65"));

  doc = default_document();
  doc["attack"]["loss"] = "semantic_latent";
  doc["attack"]["model"] = "pdm";
  CHECK(contains(config_error(doc), "attack.model"));
}

TEST_CASE("config: fractional budgets") {
  CHECK(parse_fraction("4/255") == 4.0 / 255.0);
  CHECK(parse_fraction("0.25") == 0.25);
  CHECK_THROWS_AS(parse_fraction("1/0"), ConfigError);
  CHECK_THROWS_AS(parse_fraction("x/2"), ConfigError);
  CHECK_THROWS_AS(parse_fraction(""), ConfigError);

  json doc = default_document();
  doc["attack"]["budgets"] = json::array({"4/255", "8/255", 16.0 / 255.0});
  const auto c = parse_config(doc);
  CHECK(c.attack.budgets == std::vector<double>{4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0});

  doc["attack"]["budgets"] = json::array({"2/255"});
  doc["attack"]["step"] = "4/255";
  CHECK(contains(config_error(doc), "attack.budgets[0]"));
}

TEST_CASE("config: --set overrides") {
  json doc = default_document();
  apply_override(doc, "attack.iterations=7");
  apply_override(doc, "attack.budget=8/255");
  apply_override(doc, "evaluation.metrics=[\"ssim\",\"psnr\"]");
  apply_override(doc, "output.directory=somewhere");
  CHECK(doc["attack"]["iterations"] == 7);
  CHECK(doc["attack"]["budget"] == "8/255");
  const auto c = parse_config(doc);
  CHECK(c.attack.iterations == 7);
  CHECK(c.attack.budgets == std::vector<double>{8.0 / 255.0});
  CHECK(c.evaluation.metrics == std::vector<std::string>{"ssim", "psnr"});
  CHECK(c.output == fs::path("somewhere"));

  CHECK_THROWS_AS(apply_override(doc, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "attack..x=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "attack.iterations.deeper=1"), ConfigError);
  apply_override(doc, "attack.nonsense=1");
  CHECK(contains(config_error(doc), "attack.nonsense"));
}

TEST_CASE("item seeds are distinct across items and components") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 200; ++i) {
    seen.insert(item_seed(1, "attack", i));
    seen.insert(item_seed(1, "edit:clean", i));
    seen.insert(item_seed(2, "attack", i));
  }
  CHECK(seen.size() == 600);
  CHECK(item_seed(1, "attack", 3) == item_seed(1, "attack", 3));
}

TEST_CASE("paired t test against the closed-form 4-dof distribution") {
  // Differences 1..5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5) / sqrt(5)) = sqrt(18).
  const std::vector<double> d{1, 2, 3, 4, 5};
  const PairedTest r = paired_t_test(d);
  const double t = std::sqrt(18.0);
  CHECK(r.n == 5);
  CHECK(r.mean == doctest::Approx(3.0));
  CHECK(r.t == doctest::Approx(t).epsilon(1e-12));
  // Student t CDF with 4 degrees of freedom.
  const double x = t * t;
  const double cdf = 0.5 + 0.375 * (t / std::sqrt(1 + x / 4)) * (1 - x / (12 * (1 + x / 4)));
  CHECK(r.p_value == doctest::Approx(2 * (1 - cdf)).epsilon(1e-9));

  const std::vector<double> symmetric{-1, 1, -2, 2};
  CHECK(paired_t_test(symmetric).p_value == doctest::Approx(1.0));
  const std::vector<double> zeros(6, 0.0);
  CHECK(paired_t_test(zeros).p_value == 1.0);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}), ConfigError);
}

TEST_CASE("histogram, median and budget labels") {
  const std::vector<double> v{0.5, 1.0, 1.5, 2.0, std::numeric_limits<double>::infinity()};
  const Histogram h = histogram(v, 4);
  CHECK(h.edges == std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0});
  CHECK(h.counts == std::vector<std::size_t>{0, 1, 1, 2});
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK(std::isnan(median({})));
  CHECK(budget_label(16.0 / 255.0) == "16-255");
  CHECK(budget_label(0.0) == "0-255");
  CHECK(budget_label(0.01) == "0.01");
}

TEST_CASE("parallel_for is index-stable and propagates errors") {
  std::vector<int> serial(50), threaded(50);
  parallel_for(50, 1, [&](std::size_t i) { serial[i] = static_cast<int>(i * i); });
  parallel_for(50, 4, [&](std::size_t i) { threaded[i] = static_cast<int>(i * i); });
  CHECK(serial == threaded);
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw NumericError("boom");
                               }),
                  NumericError);
}

TEST_CASE("gradient suite on random networks") {
  const auto cases = random_network_gradchecks(11, 4);
  REQUIRE(cases.size() == 4);
  for (const auto& k : cases) {
    CHECK(k.parameters <= 10'000);
    CHECK(k.max_relative_error <= 1e-4);
  }
}

TEST_CASE("train: checkpoints and bit-identical reruns") {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  const TrainSummary sa = cmd_train(parse_config(tiny_document(a)));
  const TrainSummary sb = cmd_train(parse_config(tiny_document(b)));
  CHECK(sa.pdm_hash == sb.pdm_hash);
  CHECK(sa.autoencoder_hash == sb.autoencoder_hash);
  CHECK(sa.ldm_hash == sb.ldm_hash);
  for (const char* f : {"checkpoints/pdm.ckpt", "checkpoints/autoencoder.ckpt", "checkpoints/ldm.ckpt"})
    CHECK(bytes(a / f) == bytes(b / f));
  CHECK(fs::exists(a / "train" / "report.json"));
  CHECK(fs::exists(a / "train" / "pdm_loss.csv"));

  json outside = tiny_document(a);
  outside["models"]["pdm"]["checkpoint"] = (fs::temp_directory_path() / "elsewhere.ckpt").string();
  CHECK_THROWS_AS(cmd_train(parse_config(outside)), ConfigError);
  fs::remove_all(b);
}

TEST_CASE("commands on the trained toy models") {
  const fs::path dir = fs::temp_directory_path() / "dadt_cli_train_a";
  if (!fs::exists(dir / "checkpoints" / "ldm.ckpt")) cmd_train(parse_config(tiny_document(dir)));
  json doc = tiny_document(dir);

  SUBCASE("zero budget leaves images byte-identical") {
    doc["attack"]["budgets"] = json::array({0});
    const auto results = cmd_attack(parse_config(doc));
    REQUIRE(results.size() == 1);
    for (std::size_t i = 0; i < 6; ++i)
      CHECK(bytes(dir / "attack" / "semantic_latent_0-255" / image_name(i)) == bytes(dir / "clean" / image_name(i)));
  }

  SUBCASE("budget sweep writes one directory per budget with an honest sidecar") {
    doc["attack"]["budgets"] = json::array({"4/255", "8/255", "16/255"});
    doc["attack"]["loss"] = "mist";
    cmd_attack(parse_config(doc));
    for (const char* b : {"4-255", "8-255", "16-255"}) {
      const fs::path d = dir / "attack" / (std::string("mist_") + b);
      const auto side = json::parse(std::ifstream(d / "results.json"));
      const double budget = side.at("budget");
      REQUIRE(side.at("images").size() == 6);
      for (std::size_t i = 0; i < 6; ++i) {
        CHECK(side["images"][i]["linf"].get<double>() <= budget + 1e-12);
        CHECK(side["images"][i]["losses"].size() == 2);
        const Tensor adv = load_image(d / image_name(i)), clean = load_image(dir / "clean" / image_name(i));
        CHECK(max_abs_diff(adv, clean) <= budget + 1e-12);
      }
    }
  }

  SUBCASE("crop_resize purification matches the core baseline") {
    doc["purify"]["method"] = "crop_resize";
    doc["purify"]["crop_fraction"] = 0.2;
    cmd_purify(parse_config(doc));
    const auto clean = load_image_dir(dir / "clean");
    for (std::size_t i = 0; i < clean.size(); ++i)
      CHECK(bytes(dir / "purify" / "crop_resize" / image_name(i)) == encode_ppm(crop_resize(clean[i], 0.2)));
  }

  SUBCASE("edit writes one image per input") {
    doc["edit"]["model"] = "pdm";
    cmd_edit(parse_config(doc));
    CHECK(load_image_dir(dir / "edit").size() == 6);
  }

  SUBCASE("evaluate: clean against clean") {
    cmd_attack(parse_config(doc));  // materialises clean/
    doc["evaluation"]["reference"] = "clean";
    doc["evaluation"]["candidates"] = json::array({"clean"});
    const Table t = cmd_evaluate(parse_config(doc));
    for (const auto& row : t.rows) {
      const auto metric = std::get<std::string>(row[1]);
      const double v = std::get<double>(row[2]);
      if (metric == "fid") CHECK(std::abs(v) <= 1e-6);
      if (metric == "ssim") CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    }
    const auto csv = read_file(dir / "evaluate" / "metrics.csv");
    CHECK(std::string(csv.begin(), csv.end()) == to_csv(t));
    const auto j = json::parse(std::ifstream(dir / "evaluate" / "metrics.json"));
    CHECK(j.at("rows").size() == t.rows.size());
  }

  SUBCASE("evaluate rejects sets below the Frechet minimum before computing") {
    const fs::path few = dir / "few";
    cmd_attack(parse_config(doc));
    const auto clean = load_image_dir(dir / "clean");
    save_image_set(std::span(clean).first(3), few);
    doc["evaluation"]["reference"] = "few";
    doc["evaluation"]["candidates"] = json::array({"few"});
    CHECK_THROWS_AS(cmd_evaluate(parse_config(doc)), ConfigError);
  }

  SUBCASE("missing checkpoints fail before any output") {
    const fs::path fresh = scratch("fresh");
    CHECK_THROWS_AS(cmd_attack(parse_config(tiny_document(fresh))), ConfigError);
    CHECK_FALSE(fs::exists(fresh));
  }
}

TEST_CASE("reproduce: identical bundles for the same seed, any worker count") {
  const fs::path dir = fs::temp_directory_path() / "dadt_cli_train_a";
  if (!fs::exists(dir / "checkpoints" / "ldm.ckpt")) cmd_train(parse_config(tiny_document(dir)));
  const fs::path first = scratch("repro_1"), second = scratch("repro_2");
  for (const auto& [out, workers] : {std::pair{first, 1}, std::pair{second, 3}}) {
    fs::create_directories(out);
    fs::copy(dir / "checkpoints", out / "checkpoints");
    json doc = tiny_document(out);
    doc["workers"] = workers;
    const ReproduceResult r = cmd_reproduce(parse_config(doc));
    CHECK(r.asymmetry.size() == 6);
    CHECK(r.ablation.size() == 3);
    CHECK(r.fid_purified.size() == 6);
  }
  json a = json::parse(std::ifstream(first / "reproduce" / "config.json"));
  const auto ta = tree(first / "reproduce"), tb = tree(second / "reproduce");
  REQUIRE(ta.size() == tb.size());
  for (const auto& [name, content] : ta) {
    if (name == "config.json") continue;  // records the output directory and worker count
    CHECK_MESSAGE(content == tb.at(name), name);
  }

  // Table structure: one attack-table row per model, budget and metric.
  const auto attack = json::parse(std::ifstream(first / "reproduce" / "attack_table.json"));
  CHECK(attack.at("rows").size() == 2 * 3 * 5);
  // Purification: before, after and six purifiers for each of six attacks.
  const auto purify = json::parse(std::ifstream(first / "reproduce" / "purify_table.json"));
  CHECK(purify.at("rows").size() == 6 * 8);
  const auto ablation = json::parse(std::ifstream(first / "reproduce" / "ablation.json"));
  CHECK(ablation.at("rows").size() == 3);
}

TEST_CASE("tool: exit status and fail-fast validation") {
  const fs::path dir = scratch("tool");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "bad.json") << R"({"schema_version": 1})";
    std::ofstream(dir / "unknown.json") << R"({"schema_version": 1, "dataset": {}, "atack": {}})";
  }
  const std::string out = (dir / "out").string();
  CHECK(run_tool("train --config " + (dir / "bad.json").string() + " --out " + out) != 0);
  CHECK(run_tool("attack --config " + (dir / "unknown.json").string() + " --out " + out) != 0);
  CHECK(run_tool("train --set attack.iterations=-1 --out " + out) != 0);
  CHECK_FALSE(fs::exists(out));
  CHECK(run_tool("frobnicate") != 0);
  CHECK(run_tool("gradcheck --networks 2 --out " + out) == 0);
  CHECK(fs::exists(dir / "out" / "gradcheck" / "report.csv"));
  fs::remove_all(dir);
}
