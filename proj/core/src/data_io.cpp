#include "dadt/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "dadt/errors.hpp"

namespace dadt {

namespace {

constexpr std::array<std::pair<ShapeClass, std::string_view>, 4> kClassNames{{
    {ShapeClass::circle, "circle"},
    {ShapeClass::square, "square"},
    {ShapeClass::triangle, "triangle"},
    {ShapeClass::stripes, "stripes"},
}};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

// Little-endian writer/reader for the checkpoint format.
class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(FormatErrc::truncated_payload,
                        std::string("checkpoint ends inside a ") + what + " at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json parse_descriptor(const Checkpoint& ck) {
  try {
    return nlohmann::json::parse(ck.descriptor);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrc::bad_record, std::string("checkpoint descriptor is not valid JSON: ") + e.what());
  }
}

template <class T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(FormatErrc::bad_record, std::string("descriptor lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(FormatErrc::bad_record, std::string("descriptor field '") + key + "' has the wrong type");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic dataset

std::string_view to_string(ShapeClass c) noexcept {
  for (const auto& [k, n] : kClassNames)
    if (k == c) return n;
  return "unknown";
}

ShapeClass parse_shape_class(std::string_view name) {
  for (const auto& [k, n] : kClassNames)
    if (n == name) return k;
  throw ConfigError("unknown shape class '" + std::string(name) + "'");
}

void validate(const SyntheticSpec& s) {
  if (s.size < 4) throw ConfigError("dataset image size must be >= 4");
  if (s.classes.empty()) throw ConfigError("dataset needs at least one class");
  if (s.palette.size() < 2) throw ConfigError("dataset palette needs at least two colours");
  for (const auto& c : s.palette)
    for (double v : c)
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("palette colours must lie in [0, 1]");
  if (!(s.noise >= 0.0 && s.noise <= 0.5)) throw ConfigError("dataset noise must lie in [0, 0.5]");
}

Tensor synthetic_image(const SyntheticSpec& spec, std::size_t index) {
  Rng rng = Rng(spec.seed, stream_id(streams::kDataset)).fork(index);
  const ShapeClass cls = spec.classes[index % spec.classes.size()];
  const auto np = static_cast<std::int64_t>(spec.palette.size());
  const auto bg_i = rng.uniform_int(0, np - 1);
  auto fg_i = rng.uniform_int(0, np - 2);
  if (fg_i >= bg_i) ++fg_i;
  const auto& bg = spec.palette[static_cast<std::size_t>(bg_i)];
  const auto& fg = spec.palette[static_cast<std::size_t>(fg_i)];

  const double n = static_cast<double>(spec.size);
  const double cx = n * (0.3 + 0.4 * rng.uniform());
  const double cy = n * (0.3 + 0.4 * rng.uniform());
  const double r = n * (0.15 + 0.15 * rng.uniform());
  const auto period = rng.uniform_int(4, 8);
  const auto orientation = rng.uniform_int(0, 2);
  const auto phase = rng.uniform_int(0, period - 1);

  auto inside = [&](double x, double y, std::size_t ix, std::size_t iy) {
    switch (cls) {
      case ShapeClass::circle: return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      case ShapeClass::square: return std::abs(x - cx) <= r && std::abs(y - cy) <= r;
      case ShapeClass::triangle: return y <= cy + r && std::abs(x - cx) <= (y - cy + r) / 2.0;
      case ShapeClass::stripes: {
        const auto coord = static_cast<std::int64_t>(orientation == 0 ? iy : orientation == 1 ? ix : ix + iy);
        return (coord + phase) % period < period / 2;
      }
    }
    return false;
  };

  const std::size_t s = spec.size;
  Tensor img({3, s, s});
  for (std::size_t iy = 0; iy < s; ++iy)
    for (std::size_t ix = 0; ix < s; ++ix) {
      const bool on = inside(static_cast<double>(ix) + 0.5, static_cast<double>(iy) + 0.5, ix, iy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double jitter = spec.noise * (2.0 * rng.uniform() - 1.0);
        img[(c * s + iy) * s + ix] = quantize((on ? fg[c] : bg[c]) + jitter);
      }
    }
  return img;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  validate(spec);
  Dataset d;
  d.images.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    d.images.push_back(synthetic_image(spec, i));
    d.labels.push_back(static_cast<int>(i % spec.classes.size()));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// PPM

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) -> std::uint64_t {
    skip_space();
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1u << 30)) throw FormatError(FormatErrc::malformed_header, std::string(what) + " is too large");
      ++pos;
    }
    if (pos == start) throw FormatError(FormatErrc::malformed_header, std::string("missing ") + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw FormatError(FormatErrc::malformed_header, "not a binary PPM (expected 'P6')");
  pos = 2;
  if (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#')
    throw FormatError(FormatErrc::malformed_header, "magic must be followed by whitespace");
  const std::uint64_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) throw FormatError(FormatErrc::malformed_header, "image extents must be positive");
  if (maxval == 0 || maxval > 65535) throw FormatError(FormatErrc::malformed_header, "maxval out of range");
  if (maxval != 255)
    throw FormatError(FormatErrc::unsupported_maxval, "maxval " + std::to_string(maxval) + " (only 255 supported)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw FormatError(FormatErrc::malformed_header, "header must end with a single whitespace byte");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w * h * 3);
  if (bytes.size() - pos < need)
    throw FormatError(FormatErrc::truncated_payload, "payload has " + std::to_string(bytes.size() - pos) +
                                                         " bytes, expected " + std::to_string(need));
  Tensor img({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const std::size_t plane = static_cast<std::size_t>(w * h);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = bytes[pos + p * 3 + c] / 255.0;
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  const Tensor x = image.rank() == 4 && image.dim(0) == 1 ? image.reshaped({image.dim(1), image.dim(2), image.dim(3)})
                                                          : image;
  if (x.rank() != 3 || x.dim(0) != 3) throw ShapeError("PPM images must be [3, H, W], got " + shape_string(image.shape()));
  const std::size_t h = x.dim(1), w = x.dim(2), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = x[c * plane + p];
      if (!std::isfinite(v)) throw NumericError("cannot encode a non-finite pixel");
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  return out;
}

Tensor load_image(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

void save_image(const Tensor& image, const std::filesystem::path& path) { write_file(path, encode_ppm(image)); }

// ---------------------------------------------------------------------------
// Checkpoints

std::string_view to_string(ModelKind kind) noexcept {
  switch (kind) {
    case ModelKind::pixel_denoiser: return "pixel_denoiser";
    case ModelKind::autoencoder: return "autoencoder";
    case ModelKind::latent_denoiser: return "latent_denoiser";
  }
  return "unknown";
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw("DADT");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.kind));
  w.u32(static_cast<std::uint32_t>(ck.descriptor.size()));
  w.raw(ck.descriptor);
  w.u32(static_cast<std::uint32_t>(ck.schedule_steps));
  w.f64(ck.beta_start);
  w.f64(ck.beta_end);
  w.u32(static_cast<std::uint32_t>(ck.parameters.size()));
  for (const auto& [name, t] : ck.parameters) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  auto& bytes = w.bytes();
  const std::uint64_t sum = fnv1a(bytes.data(), bytes.size());
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(sum >> (8 * i)));
  return std::move(bytes);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DADT", 4) != 0)
    throw FormatError(FormatErrc::bad_magic, "not a dadt checkpoint (magic 'DADT' missing)");
  ByteReader header(bytes.subspan(4));
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion)
    throw FormatError(FormatErrc::unsupported_version, "checkpoint version " + std::to_string(version) +
                                                           "; supported versions: " +
                                                           std::to_string(kCheckpointVersion));
  if (bytes.size() < 16) throw FormatError(FormatErrc::truncated_payload, "checkpoint too short");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (fnv1a(bytes.data(), body) != stored)
    throw FormatError(FormatErrc::bad_checksum, "checkpoint checksum mismatch (file corrupted)");

  ByteReader r(bytes.subspan(8, body - 8));
  Checkpoint ck;
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) throw FormatError(FormatErrc::bad_record, "unknown model kind " + std::to_string(kind));
  ck.kind = static_cast<ModelKind>(kind);
  ck.descriptor = r.str(r.u32());
  ck.schedule_steps = static_cast<int>(r.u32());
  ck.beta_start = r.f64();
  ck.beta_end = r.f64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(FormatErrc::bad_record, "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u32();
      if (e == 0) throw FormatError(FormatErrc::bad_record, "tensor '" + name + "' has a zero extent");
      n *= e;
    }
    if (r.remaining() / 4 < n) throw FormatError(FormatErrc::truncated_payload, "tensor '" + name + "' payload truncated");
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(r.f32());
    if (ck.parameters.contains(name)) throw FormatError(FormatErrc::bad_record, "duplicate tensor '" + name + "'");
    ck.parameters.add(name, std::move(t));
  }
  if (r.remaining() != 0) throw FormatError(FormatErrc::bad_record, "trailing bytes after the last tensor");
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

std::string describe(const UNetConfig& c) {
  nlohmann::ordered_json j;
  j["type"] = "unet";
  j["channels"] = c.channels;
  j["height"] = c.height;
  j["width"] = c.width;
  j["widths"] = c.widths;
  j["res_blocks"] = c.res_blocks;
  j["time_dim"] = c.time_dim;
  j["groups"] = c.groups;
  return j.dump();
}

std::string describe(const AutoencoderConfig& c) {
  nlohmann::ordered_json j;
  j["type"] = "autoencoder";
  j["channels"] = c.channels;
  j["height"] = c.height;
  j["width"] = c.width;
  j["latent_channels"] = c.latent_channels;
  j["stem_width"] = c.stem_width;
  j["widths"] = c.widths;
  j["linear"] = c.linear;
  j["latent_scale"] = c.latent_scale;
  return j.dump();
}

Checkpoint to_checkpoint(const DenoiserModel& model, ModelKind kind) {
  if (kind == ModelKind::autoencoder) throw ConfigError("a denoiser cannot be stored as an autoencoder");
  Checkpoint ck;
  ck.kind = kind;
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(describe(model.config()));
  j["prefix"] = model.prefix();
  ck.descriptor = j.dump();
  ck.schedule_steps = model.schedule().steps;
  ck.beta_start = model.schedule().beta_start;
  ck.beta_end = model.schedule().beta_end;
  ck.parameters = model.parameters();
  return ck;
}

Checkpoint to_checkpoint(const Autoencoder& ae) {
  Checkpoint ck;
  ck.kind = ModelKind::autoencoder;
  ck.descriptor = describe(ae.config());
  ck.parameters = ae.parameters();
  return ck;
}

DenoiserModel denoiser_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind == ModelKind::autoencoder) throw FormatError(FormatErrc::bad_record, "checkpoint holds an autoencoder");
  const auto j = parse_descriptor(ck);
  if (field<std::string>(j, "type") != "unet") throw FormatError(FormatErrc::bad_record, "descriptor is not a unet");
  UNetConfig c;
  c.channels = field<std::size_t>(j, "channels");
  c.height = field<std::size_t>(j, "height");
  c.width = field<std::size_t>(j, "width");
  c.widths = field<std::vector<std::size_t>>(j, "widths");
  c.res_blocks = field<int>(j, "res_blocks");
  c.time_dim = field<std::size_t>(j, "time_dim");
  c.groups = field<int>(j, "groups");
  const std::string prefix = j.contains("prefix") ? field<std::string>(j, "prefix") : "den";
  NoiseSchedule sched = make_linear_schedule(ck.schedule_steps, ck.beta_start, ck.beta_end);
  return DenoiserModel(c, std::move(sched), ck.parameters, prefix);
}

Autoencoder autoencoder_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::autoencoder) throw FormatError(FormatErrc::bad_record, "checkpoint holds a denoiser");
  const auto j = parse_descriptor(ck);
  if (field<std::string>(j, "type") != "autoencoder")
    throw FormatError(FormatErrc::bad_record, "descriptor is not an autoencoder");
  AutoencoderConfig c;
  c.channels = field<std::size_t>(j, "channels");
  c.height = field<std::size_t>(j, "height");
  c.width = field<std::size_t>(j, "width");
  c.latent_channels = field<std::size_t>(j, "latent_channels");
  c.stem_width = field<std::size_t>(j, "stem_width");
  c.widths = field<std::vector<std::size_t>>(j, "widths");
  c.linear = field<bool>(j, "linear");
  c.latent_scale = field<double>(j, "latent_scale");
  return Autoencoder(c, ck.parameters);
}

// ---------------------------------------------------------------------------
// Reports

void Table::add(std::vector<Cell> row) {
  if (row.size() != columns.size())
    throw ShapeError("report row has " + std::to_string(row.size()) + " cells, table has " +
                     std::to_string(columns.size()) + " columns");
  rows.push_back(std::move(row));
}

Table attack_table() { return Table{{"model_kind", "attack", "budget", "metric", "clean", "adv", "delta"}, {}}; }

Table purify_table() { return Table{{"attack", "purifier", "metric", "value"}, {}}; }

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string to_csv(const Table& table) {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
      if (c == '"') out += '"';
      out += c;
    }
    return out + "\"";
  };
  std::string out;
  for (std::size_t i = 0; i < table.columns.size(); ++i) out += (i ? "," : "") + quote(table.columns[i]);
  out += "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      if (const auto* s = std::get_if<std::string>(&row[i]))
        out += quote(*s);
      else
        out += format_number(std::get<double>(row[i]));
    }
    out += "\n";
  }
  return out;
}

std::string to_json(const Table& table) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : table.rows) {
    nlohmann::ordered_json obj = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (const auto* s = std::get_if<std::string>(&row[i])) {
        obj[table.columns[i]] = *s;
      } else {
        const double v = std::get<double>(row[i]);
        if (std::isfinite(v))
          obj[table.columns[i]] = v;
        else
          obj[table.columns[i]] = format_number(v);
      }
    }
    rows.push_back(std::move(obj));
  }
  nlohmann::ordered_json doc;
  doc["columns"] = table.columns;
  doc["rows"] = std::move(rows);
  return doc.dump(2) + "\n";
}

void write_report(const Table& table, const std::filesystem::path& stem) {
  write_text(std::filesystem::path(stem).concat(".csv"), to_csv(table));
  write_text(std::filesystem::path(stem).concat(".json"), to_json(table));
}

}  // namespace dadt
