#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

#include "dadt/tensor.hpp"

namespace dadt {

/// Counter-based generator: Philox4x32-10 (Salmon et al., SC'11).
///
/// The 64-bit seed is the Philox key. The 128-bit counter is split into a
/// 64-bit stream id (high half) and a 64-bit block index (low half), so every
/// (seed, stream) pair names an independent sequence and the n-th draw is a
/// pure function of (seed, stream, n). Normals use Box-Muller on 53-bit
/// uniforms, which keeps draws bit-identical wherever libm is.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return block_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1).
  double uniform() noexcept;
  /// Uniform integer on [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept;
  double normal() noexcept;

  Tensor normal_tensor(const Shape& shape);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  /// Independent child stream; the derivation is
  /// stream' = splitmix64(stream ^ (0x9E3779B97F4A7C15 * (index + 1))).
  Rng fork(std::uint64_t index) const noexcept;

  /// Raw Philox4x32-10 block function, exposed for known-answer tests.
  static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> counter,
                                             std::array<std::uint32_t, 2> key) noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int buffered_ = 0;
  std::optional<double> spare_normal_;
};

/// FNV-1a 64-bit hash of a label, used to name component streams.
std::uint64_t stream_id(std::string_view label) noexcept;

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Well-known component streams so training, attacks and sampling never
/// share draws.
namespace streams {
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kTraining = "training";
inline constexpr std::string_view kAttack = "attack";
inline constexpr std::string_view kSampling = "sampling";
inline constexpr std::string_view kEdit = "edit";
inline constexpr std::string_view kPurify = "purify";
inline constexpr std::string_view kDataset = "dataset";
}  // namespace streams

}  // namespace dadt
