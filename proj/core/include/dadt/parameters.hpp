#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "dadt/graph.hpp"
#include "dadt/rng.hpp"
#include "dadt/tensor.hpp"

namespace dadt {

/// Named trainable tensors, ordered by name so iteration (and hashing,
/// serialization, optimizer state) is deterministic.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  /// Declares the parameter as a graph leaf (shape from the stored tensor).
  Var leaf(ComputationGraph& g, const std::string& name) const;
  void bind(Bindings& b) const;

  std::size_t count() const;  // total scalar count
  std::uint64_t hash() const;  // FNV-1a over names, shapes and value bits

  /// Rounds every value through float32; checkpoints store 32-bit payloads.
  void round_to_float();

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  std::size_t size() const { return tensors_.size(); }

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ull);

}  // namespace dadt
