#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dadt/tensor.hpp"

namespace dadt {

/// Handle to a node of a ComputationGraph.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

enum class Op : std::uint8_t {
  input,
  constant,
  add,
  sub,
  mul,
  affine,            // a * x + b with scalar constants
  mul_per_sample,    // x[B, ...] * s[B]
  add_channel_bias,  // x[B, C, H, W] + e[B, C]
  dense,             // x[B, in] W[out, in]^T + b[out]
  conv2d,            // x[B, Cin, H, W], W[Cout, Cin, k, k], b[Cout]
  upsample2x,        // nearest neighbour
  silu,
  group_norm,        // per-group normalization, learned per-channel scale/shift
  mean,
  sum,
  mse,
  sum_squares,
  row_mean_square,  // x[B, ...] -> [B]
  dot,
  concat_channels,
  time_embedding,  // t[B] -> [B, D] sinusoidal; not differentiable in t
};

const char* op_name(Op op) noexcept;

struct Node {
  Op op = Op::input;
  std::vector<std::uint32_t> inputs;
  Shape shape;
  std::string label;
  double a = 0.0;  // affine scale, group_norm eps
  double b = 0.0;  // affine shift
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Acyclic operator graph built in topological order.
///
/// Leaves are named inputs (parameters and data alike) whose shapes are fixed
/// at build time; constants are embedded. Shape checking happens while
/// building, so a malformed graph fails with a ShapeError naming the node
/// before any evaluation.
class ComputationGraph {
 public:
  /// Declares (or re-uses, when the name is already declared with the same
  /// shape) a named leaf.
  Var input(const std::string& name, Shape shape);
  Var constant(Tensor value, std::string label = {});

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine(Var x, double scale, double shift);
  Var scale(Var x, double factor) { return affine(x, factor, 0.0); }
  Var mul_per_sample(Var x, Var s);
  Var add_channel_bias(Var x, Var bias);
  Var dense(Var x, Var weight, Var bias);
  Var conv2d(Var x, Var weight, Var bias, int stride, int padding);
  Var upsample2x(Var x);
  Var silu(Var x);
  Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
  Var mean(Var x);
  Var sum(Var x);
  Var mse(Var a, Var b);
  Var sum_squares(Var x);
  Var squared_distance(Var a, Var b) { return sum_squares(sub(a, b)); }
  Var row_mean_square(Var x);
  Var dot(Var a, Var b);
  Var concat_channels(Var a, Var b);
  Var time_embedding(Var t, std::size_t dim);

  void mark_output(const std::string& name, Var v);

  /// RAII label prefix for nodes created while alive ("enc.block1.conv").
  class Scope {
   public:
    Scope(ComputationGraph& g, std::string name);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ComputationGraph& graph_;
  };
  Scope scope(std::string name) { return Scope(*this, std::move(name)); }

  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  const Node& node(std::uint32_t id) const { return nodes_.at(id); }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  const Tensor& constant_value(std::uint32_t id) const { return constants_.at(id); }

  const std::map<std::string, std::uint32_t>& leaves() const noexcept { return leaves_; }
  const std::map<std::string, std::uint32_t>& outputs() const noexcept { return outputs_; }

 private:
  Var push(Node node);
  std::string label_for(Op op) const;
  [[noreturn]] void fail(Op op, const std::string& why,
                         std::initializer_list<Var> operands) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::uint32_t, Tensor> constants_;
  std::map<std::string, std::uint32_t> leaves_;
  std::map<std::string, std::uint32_t> outputs_;
  std::vector<std::string> scopes_;
};

/// Leaf values keyed by name. `bind` copies or moves; `bind_ref` borrows, and
/// the referenced tensor must outlive every evaluation using these bindings.
class Bindings {
 public:
  void bind(const std::string& name, Tensor value);
  void bind_ref(const std::string& name, const Tensor& value);
  const Tensor* find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name) != nullptr; }

 private:
  std::unordered_map<std::string, std::shared_ptr<const Tensor>> values_;
};

using TensorMap = std::map<std::string, Tensor>;

/// Forward pass returning every designated output.
TensorMap evaluate(const ComputationGraph& graph, const Bindings& bindings);

struct GradientResult {
  std::string primary;
  TensorMap outputs;
  TensorMap gradients;
  double value() const;
  double value_of(const std::string& output) const { return outputs.at(output).item(); }
};

/// Reverse sweep from the scalar output `output`, returning d(output)/d(leaf)
/// for every leaf named in `wrt`. All designated outputs are also returned.
GradientResult gradient(const ComputationGraph& graph, const Bindings& bindings,
                        const std::string& output, const std::set<std::string>& wrt);

}  // namespace dadt
