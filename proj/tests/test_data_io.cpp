#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>

#include "dadt/data_io.hpp"
#include "dadt/errors.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace dadt;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

FormatErrc format_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.code();
  }
  FAIL("expected FormatError");
  return FormatErrc::bad_record;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dadt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("synthetic dataset: counts, range, quantization and determinism") {
  SyntheticSpec spec;
  spec.count = 0;
  CHECK(generate_synthetic_dataset(spec).images.empty());

  spec.count = 2000;
  spec.seed = 3;
  const Dataset d = generate_synthetic_dataset(spec);
  REQUIRE(d.images.size() == 2000);
  std::map<int, int> per_class;
  for (int l : d.labels) ++per_class[l];
  CHECK(per_class.size() == 4);
  for (const auto& [cls, n] : per_class) CHECK(n == 500);

  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(d.images[i].shape() == Shape{3, 32, 32});
    for (double v : d.images[i].data()) {
      CHECK((v >= 0.0 && v <= 1.0));
      CHECK(v * 255.0 == doctest::Approx(std::round(v * 255.0)).epsilon(1e-12));
    }
  }
  CHECK(synthetic_image(spec, 17) == d.images[17]);
  spec.count = 20;
  const Dataset again = generate_synthetic_dataset(spec);
  for (std::size_t i = 0; i < 20; ++i) CHECK(encode_ppm(again.images[i]) == encode_ppm(d.images[i]));
  spec.seed = 4;
  CHECK(generate_synthetic_dataset(spec).images[0] != d.images[0]);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.classes.clear();
  CHECK_THROWS_AS(validate(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.size = 0;
  CHECK_THROWS_AS(validate(spec), ConfigError);
  CHECK(parse_shape_class(to_string(ShapeClass::stripes)) == ShapeClass::stripes);
}

TEST_CASE("ppm: hand-written 1x1 white pixel") {
  const std::string header = "P6\n1 1\n255\n";
  std::vector<std::uint8_t> file = bytes_of(header);
  file.insert(file.end(), {255, 255, 255});
  CHECK(file.size() == 14);
  const Tensor t = decode_ppm(file);
  CHECK(t.shape() == Shape{3, 1, 1});
  for (double v : t.data()) CHECK(v == 1.0);
  CHECK(encode_ppm(t) == file);
}

TEST_CASE("ppm: header comments and whitespace") {
  std::vector<std::uint8_t> file = bytes_of("P6 # comment\n2\t1\n# another\n255\n");
  file.insert(file.end(), {0, 128, 255, 10, 20, 30});
  const Tensor t = decode_ppm(file);
  CHECK(t.shape() == Shape{3, 1, 2});
  CHECK(t[0] == 0.0);       // R of pixel 0
  CHECK(t[1] == 10 / 255.0);  // R of pixel 1
  CHECK(t[2] == 128 / 255.0);  // G of pixel 0
}

TEST_CASE("ppm: distinct errors") {
  auto decode = [](const std::string& s, std::vector<std::uint8_t> payload) {
    std::vector<std::uint8_t> f = bytes_of(s);
    f.insert(f.end(), payload.begin(), payload.end());
    return [f] { decode_ppm(f); };
  };
  CHECK(format_code(decode("P5\n1 1\n255\n", {0})) == FormatErrc::malformed_header);
  CHECK(format_code(decode("P6\n1\n", {})) == FormatErrc::malformed_header);
  CHECK(format_code(decode("P6\n2 2\n255\n", {1, 2, 3})) == FormatErrc::truncated_payload);
  CHECK(format_code(decode("P6\n1 1\n65535\n", {0, 0, 0, 0, 0, 0})) == FormatErrc::unsupported_maxval);
}

TEST_CASE("ppm: save/load round trips") {
  const fs::path dir = scratch_dir("ppm");
  const Tensor x = Rng(1).uniform_tensor({3, 5, 7}, 0, 1);
  save_image(x, dir / "a.ppm");
  const Tensor y = load_image(dir / "a.ppm");
  CHECK(max_abs_diff(x, y) <= 0.5 / 255.0 + 1e-12);
  save_image(y, dir / "b.ppm");
  CHECK(read_file(dir / "a.ppm") == read_file(dir / "b.ppm"));
  CHECK(encode_ppm(x.reshaped({1, 3, 5, 7})) == encode_ppm(x));
  CHECK_THROWS_AS(load_image(dir / "missing.ppm"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: denoiser round trip at float32 precision") {
  Rng init(2);
  const DenoiserModel m(testing::tiny_unet(3, 8), default_schedule(), init);
  const Checkpoint ck = to_checkpoint(m, ModelKind::pixel_denoiser);
  const auto bytes = serialize_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DADT");
  CHECK(serialize_checkpoint(ck) == bytes);

  const Checkpoint back = parse_checkpoint(bytes);
  ParameterSet rounded = m.parameters();
  rounded.round_to_float();
  CHECK(back.parameters.hash() == rounded.hash());
  CHECK(back.kind == ModelKind::pixel_denoiser);
  CHECK(back.schedule_steps == 100);

  const DenoiserModel loaded = denoiser_from_checkpoint(back);
  CHECK(loaded.config().widths == m.config().widths);
  CHECK(loaded.schedule().alpha_bars == m.schedule().alpha_bars);
  CHECK(serialize_checkpoint(to_checkpoint(loaded, ModelKind::pixel_denoiser)) == bytes);
  CHECK_THROWS_AS(autoencoder_from_checkpoint(back), FormatError);
}

TEST_CASE("checkpoint: autoencoder round trip keeps the latent scale") {
  Rng init(3);
  Autoencoder ae(testing::tiny_autoencoder(8), init);
  ae.mutable_config().latent_scale = 1.75;
  const fs::path dir = scratch_dir("ckpt");
  save_checkpoint(to_checkpoint(ae), dir / "nested" / "ae.ckpt");
  const Autoencoder back = autoencoder_from_checkpoint(load_checkpoint(dir / "nested" / "ae.ckpt"));
  CHECK(back.config().latent_scale == 1.75);
  CHECK(back.config().widths == ae.config().widths);
  ParameterSet rounded = ae.parameters();
  rounded.round_to_float();
  CHECK(back.parameters().hash() == rounded.hash());
  CHECK_THROWS_AS(denoiser_from_checkpoint(load_checkpoint(dir / "nested" / "ae.ckpt")), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: corruption is detected with distinct errors") {
  Rng init(4);
  const DenoiserModel m(testing::tiny_unet(2, 4), default_schedule(), init);
  const auto bytes = serialize_checkpoint(to_checkpoint(m, ModelKind::latent_denoiser));

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  CHECK(format_code([&] { parse_checkpoint(flipped); }) == FormatErrc::bad_checksum);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(format_code([&] { parse_checkpoint(magic); }) == FormatErrc::bad_magic);

  auto version = bytes;
  version[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  try {
    parse_checkpoint(version);
    FAIL("expected a version error");
  } catch (const FormatError& e) {
    CHECK(e.code() == FormatErrc::unsupported_version);
    CHECK(std::string(e.what()).find("supported versions: 1") != std::string::npos);
  }

  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_AS(parse_checkpoint(truncated), FormatError);
}

TEST_CASE("checkpoint: every single-byte flip is rejected") {
  Rng init(5);
  const DenoiserModel m(testing::tiny_unet(2, 4), default_schedule(), init);
  const auto bytes = serialize_checkpoint(to_checkpoint(m, ModelKind::pixel_denoiser));
  Rng r(6);
  for (int trial = 0; trial < 300; ++trial) {
    auto c = bytes;
    const auto pos = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(c.size()) - 1));
    c[pos] ^= static_cast<std::uint8_t>(r.uniform_int(1, 255));
    CHECK_THROWS_AS(parse_checkpoint(c), FormatError);
  }
}

TEST_CASE("descriptors are JSON") {
  const auto j = nlohmann::json::parse(describe(testing::tiny_unet(3, 8)));
  CHECK(j.at("type") == "unet");
  CHECK(j.at("widths") == nlohmann::json::array({4, 8}));
}

TEST_CASE("number formatting") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(20.0) == "20");
  CHECK(format_number(1.0 / 3.0) == "0.3333333333333333");
  CHECK(format_number(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_number(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(format_number(std::nan("")) == "nan");
}

TEST_CASE("reports: header-only CSV and exact rows") {
  Table t = attack_table();
  CHECK(to_csv(t) == "model_kind,attack,budget,metric,clean,adv,delta\n");
  t.add({std::string("ldm"), std::string("mist"), 16.0 / 255.0, std::string("ssim"), 0.75, 0.5, -0.25});
  CHECK(to_csv(t) ==
        "model_kind,attack,budget,metric,clean,adv,delta\n"
        "ldm,mist,0.06274509803921569,ssim,0.75,0.5,-0.25\n");
  CHECK_THROWS_AS(t.add({std::string("too short")}), ShapeError);
  CHECK(to_csv(purify_table()) == "attack,purifier,metric,value\n");
}

TEST_CASE("reports: CSV and JSON agree cell for cell") {
  Table t = purify_table();
  t.add({std::string("mist"), std::string("pdm_pure"), std::string("fid"), 12.5});
  t.add({std::string("semantic"), std::string("jpeg, q65"), std::string("psnr"),
         std::numeric_limits<double>::infinity()});
  const auto j = nlohmann::json::parse(to_json(t));
  CHECK(j.at("columns").size() == 4);
  REQUIRE(j.at("rows").size() == 2);
  CHECK(j["rows"][0]["value"] == 12.5);
  CHECK(j["rows"][1]["value"] == "inf");
  CHECK(j["rows"][1]["purifier"] == "jpeg, q65");
  // Cells containing commas are quoted in CSV.
  CHECK(to_csv(t).find("\"jpeg, q65\"") != std::string::npos);

  const fs::path dir = scratch_dir("report");
  write_report(t, dir / "out" / "purify");
  CHECK(fs::exists(dir / "out" / "purify.csv"));
  CHECK(fs::exists(dir / "out" / "purify.json"));
  const auto csv = read_file(dir / "out" / "purify.csv");
  CHECK(std::string(csv.begin(), csv.end()) == to_csv(t));
  fs::remove_all(dir);
}

TEST_CASE("reports: unwritable path") {
  const fs::path dir = scratch_dir("unwritable");
  write_text(dir / "file", "x");
  CHECK_THROWS_AS(write_report(purify_table(), dir / "file" / "sub" / "r"), IoError);
  fs::remove_all(dir);
}
