#include "dadt/parameters.hpp"

#include <cmath>
#include <cstring>

#include "dadt/errors.hpp"

namespace dadt {

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  auto [it, inserted] = tensors_.emplace(name, std::move(value));
  if (!inserted) throw ConfigError("duplicate parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Var ParameterSet::leaf(ComputationGraph& g, const std::string& name) const {
  return g.input(name, at(name).shape());
}

void ParameterSet::bind(Bindings& b) const {
  for (const auto& [name, t] : tensors_) b.bind_ref(name, t);
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : tensors_) {
    h = fnv1a(name.data(), name.size(), h);
    for (auto e : t.shape()) {
      const auto v = static_cast<std::uint64_t>(e);
      h = fnv1a(&v, sizeof v, h);
    }
    h = fnv1a(t.data().data(), t.size() * sizeof(double), h);
  }
  return h;
}

void ParameterSet::round_to_float() {
  for (auto& [name, t] : tensors_)
    for (auto& v : t.storage()) v = static_cast<double>(static_cast<float>(v));
}

Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

}  // namespace dadt
