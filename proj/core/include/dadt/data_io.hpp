#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dadt/diffusion.hpp"
#include "dadt/models.hpp"
#include "dadt/parameters.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

// ---------------------------------------------------------------------------
// Synthetic dataset

enum class ShapeClass { circle, square, triangle, stripes };

std::string_view to_string(ShapeClass c) noexcept;
ShapeClass parse_shape_class(std::string_view name);

struct SyntheticSpec {
  std::size_t size = 32;
  std::vector<ShapeClass> classes{ShapeClass::circle, ShapeClass::square, ShapeClass::triangle,
                                  ShapeClass::stripes};
  std::vector<std::array<double, 3>> palette{
      {0.90, 0.20, 0.20}, {0.20, 0.70, 0.30}, {0.20, 0.35, 0.90}, {0.95, 0.85, 0.20},
      {0.85, 0.45, 0.85}, {0.15, 0.80, 0.85}, {0.95, 0.95, 0.95}, {0.10, 0.10, 0.15},
  };
  double noise = 0.02;  // background noise amplitude (uniform +-noise)
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

void validate(const SyntheticSpec& spec);

struct Dataset {
  std::vector<Tensor> images;  // [3, size, size], values k / 255
  std::vector<int> labels;     // index into spec.classes
};

/// Item i has class i mod |classes| and depends only on (seed, i).
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);
Tensor synthetic_image(const SyntheticSpec& spec, std::size_t index);

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

/// Decodes a P6 file image into [3, H, W] with values v / 255.
Tensor decode_ppm(std::span<const std::uint8_t> bytes);
/// Encodes [3, H, W] (or [1, 3, H, W]) values in [0, 1] rounded to 8 bits.
std::vector<std::uint8_t> encode_ppm(const Tensor& image);

Tensor load_image(const std::filesystem::path& path);
void save_image(const Tensor& image, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes atomically enough for our purposes: the file is replaced as a whole.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint32_t { pixel_denoiser = 1, autoencoder = 2, latent_denoiser = 3 };

std::string_view to_string(ModelKind kind) noexcept;

struct Checkpoint {
  ModelKind kind = ModelKind::pixel_denoiser;
  std::string descriptor;  // architecture JSON
  int schedule_steps = 0;  // 0 when the model has no schedule
  double beta_start = 0.0;
  double beta_end = 0.0;
  ParameterSet parameters;
};

/// "DADT", u32 version, u32 kind, u32 length + descriptor JSON, u32 T,
/// f64 beta_start, f64 beta_end, u32 tensor count, then per tensor a u32
/// name length, name bytes, u32 rank, u32 extents and float32 payload, all
/// little-endian; finally the u64 FNV-1a hash of every preceding byte.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
/// Rejects bad magic, unsupported versions, checksum mismatches and
/// malformed records with distinct FormatError codes.
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const DenoiserModel& model, ModelKind kind);
Checkpoint to_checkpoint(const Autoencoder& ae);
DenoiserModel denoiser_from_checkpoint(const Checkpoint& checkpoint);
Autoencoder autoencoder_from_checkpoint(const Checkpoint& checkpoint);

std::string describe(const UNetConfig& config);
std::string describe(const AutoencoderConfig& config);

// ---------------------------------------------------------------------------
// Reports

using Cell = std::variant<std::string, double>;

/// Column-named table serialised to CSV and JSON with identical cells.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row);
};

Table attack_table();    // model_kind, attack, budget, metric, clean, adv, delta
Table purify_table();    // attack, purifier, metric, value

/// Shortest round-trip decimal; "inf", "-inf" and "nan" for non-finite values.
std::string format_number(double v);

std::string to_csv(const Table& table);
std::string to_json(const Table& table);

/// Writes <stem>.csv and <stem>.json; throws IoError if either is unwritable.
void write_report(const Table& table, const std::filesystem::path& stem);

}  // namespace dadt
