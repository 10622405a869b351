#include "dadt/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "dadt/errors.hpp"

namespace dadt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad;
  std::size_t patch() const { return cin * k * k; }
  std::size_t out_pixels() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& wt, int stride, int pad) {
  ConvGeometry g{};
  g.batch = x[0];
  g.cin = x[1];
  g.h = x[2];
  g.w = x[3];
  g.cout = wt[0];
  g.k = wt[2];
  g.stride = stride;
  g.pad = pad;
  g.ho = (g.h + 2 * static_cast<std::size_t>(pad) - g.k) / static_cast<std::size_t>(stride) + 1;
  g.wo = (g.w + 2 * static_cast<std::size_t>(pad) - g.k) / static_cast<std::size_t>(stride) + 1;
  return g;
}

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const auto ho = static_cast<std::ptrdiff_t>(g.ho), wo = static_cast<std::ptrdiff_t>(g.wo);
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  const auto k = static_cast<std::ptrdiff_t>(g.k);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < k; ++kx, ++row) {
        double* out = cols + row * g.out_pixels();
        for (std::ptrdiff_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(out + oy * wo, out + (oy + 1) * wo, 0.0);
            continue;
          }
          for (std::ptrdiff_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = ox * g.stride - g.pad + kx;
            out[oy * wo + ox] = (ix < 0 || ix >= w) ? 0.0 : plane[iy * w + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const auto ho = static_cast<std::ptrdiff_t>(g.ho), wo = static_cast<std::ptrdiff_t>(g.wo);
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w);
  const auto k = static_cast<std::ptrdiff_t>(g.k);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* plane = dx + c * g.h * g.w;
    for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < k; ++kx, ++row) {
        const double* in = cols + row * g.out_pixels();
        for (std::ptrdiff_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::ptrdiff_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += in[oy * wo + ox];
          }
        }
      }
    }
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::size_t spatial(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

double time_frequency(std::size_t i, std::size_t half) {
  return std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
}

}  // namespace

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::affine: return "affine";
    case Op::mul_per_sample: return "mul_per_sample";
    case Op::add_channel_bias: return "add_channel_bias";
    case Op::dense: return "dense";
    case Op::conv2d: return "conv2d";
    case Op::upsample2x: return "upsample2x";
    case Op::silu: return "silu";
    case Op::group_norm: return "group_norm";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::mse: return "mse";
    case Op::sum_squares: return "sum_squares";
    case Op::row_mean_square: return "row_mean_square";
    case Op::dot: return "dot";
    case Op::concat_channels: return "concat_channels";
    case Op::time_embedding: return "time_embedding";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

ComputationGraph::Scope::Scope(ComputationGraph& g, std::string name) : graph_(g) {
  graph_.scopes_.push_back(std::move(name));
}

ComputationGraph::Scope::~Scope() { graph_.scopes_.pop_back(); }

std::string ComputationGraph::label_for(Op op) const {
  std::string label;
  for (const auto& s : scopes_) label += s + ".";
  return label + op_name(op) + "#" + std::to_string(nodes_.size());
}

void ComputationGraph::fail(Op op, const std::string& why, std::initializer_list<Var> operands) const {
  std::string msg = "node '" + label_for(op) + "': " + why + " (operand shapes";
  for (Var v : operands) msg += " " + shape_string(nodes_.at(v.id).shape);
  throw ShapeError(msg + ")");
}

Var ComputationGraph::push(Node node) {
  for (auto in : node.inputs)
    if (in >= nodes_.size()) throw ShapeError("operand refers to a node that does not exist");
  if (node.label.empty()) node.label = label_for(node.op);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var ComputationGraph::input(const std::string& name, Shape shape) {
  if (auto it = leaves_.find(name); it != leaves_.end()) {
    if (nodes_[it->second].shape != shape)
      throw ShapeError("leaf '" + name + "' redeclared with shape " + shape_string(shape) +
                       ", previously " + shape_string(nodes_[it->second].shape));
    return Var{it->second};
  }
  if (shape.empty() || shape_size(shape) == 0)
    throw ShapeError("leaf '" + name + "' must have positive extents");
  Node n;
  n.op = Op::input;
  n.shape = std::move(shape);
  n.label = name;
  Var v = push(std::move(n));
  leaves_[name] = v.id;
  return v;
}

Var ComputationGraph::constant(Tensor value, std::string label) {
  Node n;
  n.op = Op::constant;
  n.shape = value.shape();
  n.label = label.empty() ? label_for(Op::constant) : std::move(label);
  Var v = push(std::move(n));
  constants_.emplace(v.id, std::move(value));
  return v;
}

namespace {
Node make(Op op, std::initializer_list<Var> in, Shape shape) {
  Node n;
  n.op = op;
  for (Var v : in) n.inputs.push_back(v.id);
  n.shape = std::move(shape);
  return n;
}
}  // namespace

Var ComputationGraph::add(Var a, Var b) {
  if (shape(a) != shape(b)) fail(Op::add, "shape mismatch", {a, b});
  return push(make(Op::add, {a, b}, shape(a)));
}

Var ComputationGraph::sub(Var a, Var b) {
  if (shape(a) != shape(b)) fail(Op::sub, "shape mismatch", {a, b});
  return push(make(Op::sub, {a, b}, shape(a)));
}

Var ComputationGraph::mul(Var a, Var b) {
  if (shape(a) != shape(b)) fail(Op::mul, "shape mismatch", {a, b});
  return push(make(Op::mul, {a, b}, shape(a)));
}

Var ComputationGraph::affine(Var x, double s, double shift) {
  Node n = make(Op::affine, {x}, shape(x));
  n.a = s;
  n.b = shift;
  return push(std::move(n));
}

Var ComputationGraph::mul_per_sample(Var x, Var s) {
  if (shape(s).size() != 1 || shape(s)[0] != shape(x)[0])
    fail(Op::mul_per_sample, "scale must be [B] matching the batch axis", {x, s});
  return push(make(Op::mul_per_sample, {x, s}, shape(x)));
}

Var ComputationGraph::add_channel_bias(Var x, Var e) {
  const Shape& xs = shape(x);
  const Shape& es = shape(e);
  if (xs.size() != 4 || es.size() != 2 || es[0] != xs[0] || es[1] != xs[1])
    fail(Op::add_channel_bias, "expected x[B,C,H,W] and bias[B,C]", {x, e});
  return push(make(Op::add_channel_bias, {x, e}, xs));
}

Var ComputationGraph::dense(Var x, Var w, Var b) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(w);
  const Shape& bs = shape(b);
  if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1] || bs.size() != 1 || bs[0] != ws[0])
    fail(Op::dense, "expected x[B,in], W[out,in], b[out]", {x, w, b});
  return push(make(Op::dense, {x, w, b}, {xs[0], ws[0]}));
}

Var ComputationGraph::conv2d(Var x, Var w, Var b, int stride, int padding) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(w);
  const Shape& bs = shape(b);
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bs.size() != 1 ||
      bs[0] != ws[0])
    fail(Op::conv2d, "expected x[B,Cin,H,W], W[Cout,Cin,k,k], b[Cout]", {x, w, b});
  if (stride < 1 || padding < 0) fail(Op::conv2d, "invalid stride/padding", {x, w, b});
  if (xs[2] + 2 * static_cast<std::size_t>(padding) < ws[2] ||
      xs[3] + 2 * static_cast<std::size_t>(padding) < ws[3])
    fail(Op::conv2d, "kernel larger than padded input", {x, w, b});
  const auto g = conv_geometry(xs, ws, stride, padding);
  Node n = make(Op::conv2d, {x, w, b}, {g.batch, g.cout, g.ho, g.wo});
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

Var ComputationGraph::upsample2x(Var x) {
  const Shape& xs = shape(x);
  if (xs.size() != 4) fail(Op::upsample2x, "expected x[B,C,H,W]", {x});
  return push(make(Op::upsample2x, {x}, {xs[0], xs[1], 2 * xs[2], 2 * xs[3]}));
}

Var ComputationGraph::silu(Var x) { return push(make(Op::silu, {x}, shape(x))); }

Var ComputationGraph::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  const Shape& xs = shape(x);
  if (xs.size() < 2 || groups < 1 || xs[1] % static_cast<std::size_t>(groups) != 0)
    fail(Op::group_norm, "channels must be divisible by groups", {x, gamma, beta});
  if (shape(gamma) != Shape{xs[1]} || shape(beta) != Shape{xs[1]})
    fail(Op::group_norm, "scale/shift must be [C]", {x, gamma, beta});
  Node n = make(Op::group_norm, {x, gamma, beta}, xs);
  n.groups = groups;
  n.a = eps;
  return push(std::move(n));
}

Var ComputationGraph::mean(Var x) { return push(make(Op::mean, {x}, {1})); }
Var ComputationGraph::sum(Var x) { return push(make(Op::sum, {x}, {1})); }

Var ComputationGraph::mse(Var a, Var b) {
  if (shape(a) != shape(b)) fail(Op::mse, "shape mismatch", {a, b});
  return push(make(Op::mse, {a, b}, {1}));
}

Var ComputationGraph::sum_squares(Var x) { return push(make(Op::sum_squares, {x}, {1})); }

Var ComputationGraph::row_mean_square(Var x) {
  return push(make(Op::row_mean_square, {x}, {shape(x)[0]}));
}

Var ComputationGraph::dot(Var a, Var b) {
  if (shape(a) != shape(b)) fail(Op::dot, "shape mismatch", {a, b});
  return push(make(Op::dot, {a, b}, {1}));
}

Var ComputationGraph::concat_channels(Var a, Var b) {
  const Shape& as = shape(a);
  const Shape& bs = shape(b);
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    fail(Op::concat_channels, "expected [B,C,H,W] operands agreeing outside the channel axis",
         {a, b});
  return push(make(Op::concat_channels, {a, b}, {as[0], as[1] + bs[1], as[2], as[3]}));
}

Var ComputationGraph::time_embedding(Var t, std::size_t dim) {
  if (shape(t).size() != 1 || dim < 2 || dim % 2 != 0)
    fail(Op::time_embedding, "expected t[B] and an even embedding size", {t});
  return push(make(Op::time_embedding, {t}, {shape(t)[0], dim}));
}

void ComputationGraph::mark_output(const std::string& name, Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw ShapeError("output '" + name + "' is not a node");
  outputs_[name] = v.id;
}

// ---------------------------------------------------------------------------
// Bindings

void Bindings::bind(const std::string& name, Tensor value) {
  values_[name] = std::make_shared<const Tensor>(std::move(value));
}

void Bindings::bind_ref(const std::string& name, const Tensor& value) {
  values_[name] = std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>(), &value);
}

const Tensor* Bindings::find(const std::string& name) const {
  auto it = values_.find(name);
  return it == values_.end() ? nullptr : it->second.get();
}

// ---------------------------------------------------------------------------
// Execution

namespace {

class Executor {
 public:
  Executor(const ComputationGraph& g, const Bindings& b) : g_(g), b_(b) {
    values_.assign(g.node_count(), nullptr);
    owned_.resize(g.node_count());
    aux_.resize(g.node_count());
  }

  /// Marks ancestors of `roots` (inclusive).
  std::vector<char> ancestors(const std::vector<std::uint32_t>& roots) const {
    std::vector<char> live(g_.node_count(), 0);
    for (auto r : roots) live[r] = 1;
    for (std::size_t i = g_.node_count(); i-- > 0;) {
      if (!live[i]) continue;
      for (auto in : g_.node(static_cast<std::uint32_t>(i)).inputs) live[in] = 1;
    }
    return live;
  }

  void forward(const std::vector<char>& live) {
    for (std::uint32_t i = 0; i < g_.node_count(); ++i) {
      if (!live[i]) continue;
      const Node& n = g_.node(i);
      if (n.op == Op::input) {
        const Tensor* t = b_.find(n.label);
        if (!t) throw ShapeError("leaf '" + n.label + "' is not bound");
        if (t->shape() != n.shape)
          throw ShapeError("leaf '" + n.label + "' bound with shape " + shape_string(t->shape()) +
                           ", declared " + shape_string(n.shape));
        values_[i] = t;
        continue;
      }
      if (n.op == Op::constant) {
        values_[i] = &g_.constant_value(i);
        continue;
      }
      owned_[i] = Tensor(n.shape);
      run_forward(i, n, owned_[i]);
      if (!owned_[i].all_finite())
        throw NumericError("node '" + n.label + "' produced a non-finite value");
      values_[i] = &owned_[i];
    }
  }

  const Tensor& value(std::uint32_t i) const { return *values_[i]; }

  TensorMap gradients(std::uint32_t root, const std::set<std::string>& wrt) {
    const std::size_t n = g_.node_count();
    std::vector<char> needs(n, 0);
    for (std::uint32_t i = 0; i < n; ++i) {
      const Node& node = g_.node(i);
      if (node.op == Op::input) {
        needs[i] = wrt.count(node.label) ? 1 : 0;
      } else if (node.op != Op::constant && node.op != Op::time_embedding) {
        for (auto in : node.inputs) needs[i] = needs[i] || needs[in];
      }
    }
    const auto live = ancestors({root});
    grads_.assign(n, Tensor());
    grads_[root] = Tensor(g_.node(root).shape, 1.0);
    for (std::uint32_t i = root + 1; i-- > 0;) {
      if (!live[i] || !needs[i] || grads_[i].empty()) continue;
      const Node& node = g_.node(i);
      if (node.op == Op::input || node.op == Op::constant) continue;
      run_backward(i, node, needs);
    }
    TensorMap out;
    for (const auto& name : wrt) {
      auto it = g_.leaves().find(name);
      if (it == g_.leaves().end()) throw ShapeError("gradient requested for unknown leaf '" + name + "'");
      Tensor gr = grads_[it->second];
      if (gr.empty()) gr = Tensor(g_.node(it->second).shape, 0.0);
      out.emplace(name, std::move(gr));
    }
    return out;
  }

 private:
  Tensor& grad_of(std::uint32_t id) {
    if (grads_[id].empty()) grads_[id] = Tensor(g_.node(id).shape, 0.0);
    return grads_[id];
  }

  void run_forward(std::uint32_t id, const Node& n, Tensor& out);
  void run_backward(std::uint32_t id, const Node& n, const std::vector<char>& needs);

  const ComputationGraph& g_;
  const Bindings& b_;
  std::vector<const Tensor*> values_;
  std::vector<Tensor> owned_;
  std::vector<std::vector<double>> aux_;
  std::vector<Tensor> grads_;
};

void Executor::run_forward(std::uint32_t id, const Node& n, Tensor& out) {
  auto in = [&](std::size_t k) -> const Tensor& { return *values_[n.inputs[k]]; };
  double* y = out.data().data();
  switch (n.op) {
    case Op::input:
    case Op::constant:
      break;
    case Op::add: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) y[i] = a[i] + b[i];
      break;
    }
    case Op::sub: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) y[i] = a[i] - b[i];
      break;
    }
    case Op::mul: {
      const auto& a = in(0);
      const auto& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) y[i] = a[i] * b[i];
      break;
    }
    case Op::affine: {
      const auto& x = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) y[i] = n.a * x[i] + n.b;
      break;
    }
    case Op::mul_per_sample: {
      const auto& x = in(0);
      const auto& s = in(1);
      const std::size_t per = x.size() / x.dim(0);
      for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t i = 0; i < per; ++i) y[b * per + i] = s[b] * x[b * per + i];
      break;
    }
    case Op::add_channel_bias: {
      const auto& x = in(0);
      const auto& e = in(1);
      const std::size_t hw = spatial(x.shape());
      const std::size_t bc = x.dim(0) * x.dim(1);
      for (std::size_t p = 0; p < bc; ++p)
        for (std::size_t i = 0; i < hw; ++i) y[p * hw + i] = x[p * hw + i] + e[p];
      break;
    }
    case Op::dense: {
      const auto& x = in(0);
      const auto& w = in(1);
      const auto& b = in(2);
      const auto B = static_cast<Index>(x.dim(0)), I = static_cast<Index>(x.dim(1)),
                 O = static_cast<Index>(w.dim(0));
      MapMat ym(y, B, O);
      ym.noalias() = ConstMapMat(x.data().data(), B, I) * ConstMapMat(w.data().data(), O, I).transpose();
      for (Index r = 0; r < B; ++r)
        for (Index c = 0; c < O; ++c) ym(r, c) += b[static_cast<std::size_t>(c)];
      break;
    }
    case Op::conv2d: {
      const auto& x = in(0);
      const auto& w = in(1);
      const auto& b = in(2);
      const auto geo = conv_geometry(x.shape(), w.shape(), n.stride, n.padding);
      const auto P = static_cast<Index>(geo.patch()), HW = static_cast<Index>(geo.out_pixels()),
                 O = static_cast<Index>(geo.cout);
      ConstMapMat wm(w.data().data(), O, P);
      Buffer cols(geo.pointwise() ? 0 : geo.patch() * geo.out_pixels());
      for (std::size_t bi = 0; bi < geo.batch; ++bi) {
        const double* xb = x.data().data() + bi * geo.cin * geo.h * geo.w;
        const double* colp = xb;
        if (!geo.pointwise()) {
          im2col(xb, geo, cols.data());
          colp = cols.data();
        }
        MapMat ym(y + bi * geo.cout * geo.out_pixels(), O, HW);
        ym.noalias() = wm * ConstMapMat(colp, P, HW);
        for (Index c = 0; c < O; ++c) ym.row(c).array() += b[static_cast<std::size_t>(c)];
      }
      break;
    }
    case Op::upsample2x: {
      const auto& x = in(0);
      const std::size_t H = x.dim(2), W = x.dim(3), planes = x.dim(0) * x.dim(1);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < 2 * H; ++oy)
          for (std::size_t ox = 0; ox < 2 * W; ++ox)
            y[(p * 2 * H + oy) * 2 * W + ox] = x[(p * H + oy / 2) * W + ox / 2];
      break;
    }
    case Op::silu: {
      const auto& x = in(0);
      for (std::size_t i = 0; i < out.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
      break;
    }
    case Op::group_norm: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      const auto& beta = in(2);
      const std::size_t B = x.dim(0), C = x.dim(1), hw = spatial(x.shape());
      const auto G = static_cast<std::size_t>(n.groups);
      const std::size_t cpg = C / G, count = cpg * hw;
      auto& stats = aux_[id];
      stats.assign(B * G * 2, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t g = 0; g < G; ++g) {
          const double* xs = x.data().data() + (b * C + g * cpg) * hw;
          double mu = 0.0;
          for (std::size_t i = 0; i < count; ++i) mu += xs[i];
          mu /= static_cast<double>(count);
          double var = 0.0;
          for (std::size_t i = 0; i < count; ++i) var += (xs[i] - mu) * (xs[i] - mu);
          var /= static_cast<double>(count);
          const double rstd = 1.0 / std::sqrt(var + n.a);
          stats[(b * G + g) * 2] = mu;
          stats[(b * G + g) * 2 + 1] = rstd;
          double* ys = y + (b * C + g * cpg) * hw;
          for (std::size_t c = 0; c < cpg; ++c) {
            const double ga = gamma[g * cpg + c], be = beta[g * cpg + c];
            for (std::size_t i = 0; i < hw; ++i)
              ys[c * hw + i] = ga * (xs[c * hw + i] - mu) * rstd + be;
          }
        }
      }
      break;
    }
    case Op::mean: {
      const auto& x = in(0);
      double s = 0.0;
      for (double v : x.data()) s += v;
      y[0] = s / static_cast<double>(x.size());
      break;
    }
    case Op::sum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      y[0] = s;
      break;
    }
    case Op::mse: {
      const auto& a = in(0);
      const auto& b = in(1);
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      y[0] = s / static_cast<double>(a.size());
      break;
    }
    case Op::sum_squares: {
      double s = 0.0;
      for (double v : in(0).data()) s += v * v;
      y[0] = s;
      break;
    }
    case Op::row_mean_square: {
      const auto& x = in(0);
      const std::size_t per = x.size() / x.dim(0);
      for (std::size_t b = 0; b < x.dim(0); ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < per; ++i) s += x[b * per + i] * x[b * per + i];
        y[b] = s / static_cast<double>(per);
      }
      break;
    }
    case Op::dot: {
      const auto& a = in(0);
      const auto& b = in(1);
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      y[0] = s;
      break;
    }
    case Op::concat_channels: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t B = a.dim(0), hw = spatial(a.shape());
      const std::size_t na = a.dim(1) * hw, nb = b.dim(1) * hw;
      for (std::size_t bi = 0; bi < B; ++bi) {
        std::copy_n(a.data().data() + bi * na, na, y + bi * (na + nb));
        std::copy_n(b.data().data() + bi * nb, nb, y + bi * (na + nb) + na);
      }
      break;
    }
    case Op::time_embedding: {
      const auto& t = in(0);
      const std::size_t D = n.shape[1], half = D / 2;
      for (std::size_t b = 0; b < t.size(); ++b)
        for (std::size_t i = 0; i < half; ++i) {
          const double arg = t[b] * time_frequency(i, half);
          y[b * D + i] = std::sin(arg);
          y[b * D + half + i] = std::cos(arg);
        }
      break;
    }
  }
}

void Executor::run_backward(std::uint32_t id, const Node& n, const std::vector<char>& needs) {
  const Tensor& gy = grads_[id];
  const double* dy = gy.data().data();
  auto in = [&](std::size_t k) -> const Tensor& { return *values_[n.inputs[k]]; };
  auto need = [&](std::size_t k) { return needs[n.inputs[k]] != 0; };
  auto gin = [&](std::size_t k) -> double* { return grad_of(n.inputs[k]).data().data(); };

  switch (n.op) {
    case Op::input:
    case Op::constant:
    case Op::time_embedding:
      break;
    case Op::add:
    case Op::sub: {
      const double sign = n.op == Op::add ? 1.0 : -1.0;
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += dy[i];
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += sign * dy[i];
      }
      break;
    }
    case Op::mul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += dy[i] * b[i];
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += dy[i] * a[i];
      }
      break;
    }
    case Op::affine: {
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += n.a * dy[i];
      }
      break;
    }
    case Op::mul_per_sample: {
      const auto& x = in(0);
      const auto& s = in(1);
      const std::size_t per = x.size() / x.dim(0);
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t b = 0; b < x.dim(0); ++b)
          for (std::size_t i = 0; i < per; ++i) d[b * per + i] += s[b] * dy[b * per + i];
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t b = 0; b < x.dim(0); ++b) {
          double acc = 0.0;
          for (std::size_t i = 0; i < per; ++i) acc += x[b * per + i] * dy[b * per + i];
          d[b] += acc;
        }
      }
      break;
    }
    case Op::add_channel_bias: {
      const auto& x = in(0);
      const std::size_t hw = spatial(x.shape()), bc = x.dim(0) * x.dim(1);
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < gy.size(); ++i) d[i] += dy[i];
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t p = 0; p < bc; ++p) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += dy[p * hw + i];
          d[p] += acc;
        }
      }
      break;
    }
    case Op::dense: {
      const auto& x = in(0);
      const auto& w = in(1);
      const auto B = static_cast<Index>(x.dim(0)), I = static_cast<Index>(x.dim(1)),
                 O = static_cast<Index>(w.dim(0));
      ConstMapMat dym(dy, B, O);
      if (need(0)) MapMat(gin(0), B, I).noalias() += dym * ConstMapMat(w.data().data(), O, I);
      if (need(1)) MapMat(gin(1), O, I).noalias() += dym.transpose() * ConstMapMat(x.data().data(), B, I);
      if (need(2)) {
        double* d = gin(2);
        for (Index r = 0; r < B; ++r)
          for (Index c = 0; c < O; ++c) d[c] += dym(r, c);
      }
      break;
    }
    case Op::conv2d: {
      const auto& x = in(0);
      const auto& w = in(1);
      const auto geo = conv_geometry(x.shape(), w.shape(), n.stride, n.padding);
      const auto P = static_cast<Index>(geo.patch()), HW = static_cast<Index>(geo.out_pixels()),
                 O = static_cast<Index>(geo.cout);
      ConstMapMat wm(w.data().data(), O, P);
      Buffer cols(geo.pointwise() ? 0 : geo.patch() * geo.out_pixels());
      Buffer dcols(geo.pointwise() ? 0 : geo.patch() * geo.out_pixels());
      double* dx = need(0) ? gin(0) : nullptr;
      double* dw = need(1) ? gin(1) : nullptr;
      double* db = need(2) ? gin(2) : nullptr;
      const std::size_t in_size = geo.cin * geo.h * geo.w;
      for (std::size_t bi = 0; bi < geo.batch; ++bi) {
        ConstMapMat dym(dy + bi * geo.cout * geo.out_pixels(), O, HW);
        if (dw) {
          const double* xb = x.data().data() + bi * in_size;
          const double* colp = xb;
          if (!geo.pointwise()) {
            im2col(xb, geo, cols.data());
            colp = cols.data();
          }
          MapMat(dw, O, P).noalias() += dym * ConstMapMat(colp, P, HW).transpose();
        }
        if (db)
          for (Index c = 0; c < O; ++c) db[c] += dym.row(c).sum();
        if (dx) {
          if (geo.pointwise()) {
            MapMat(dx + bi * in_size, P, HW).noalias() += wm.transpose() * dym;
          } else {
            MapMat(dcols.data(), P, HW).noalias() = wm.transpose() * dym;
            col2im_add(dcols.data(), geo, dx + bi * in_size);
          }
        }
      }
      break;
    }
    case Op::upsample2x: {
      if (!need(0)) break;
      const auto& x = in(0);
      const std::size_t H = x.dim(2), W = x.dim(3), planes = x.dim(0) * x.dim(1);
      double* d = gin(0);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < 2 * H; ++oy)
          for (std::size_t ox = 0; ox < 2 * W; ++ox)
            d[(p * H + oy / 2) * W + ox / 2] += dy[(p * 2 * H + oy) * 2 * W + ox];
      break;
    }
    case Op::silu: {
      if (!need(0)) break;
      const auto& x = in(0);
      double* d = gin(0);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double s = sigmoid(x[i]);
        d[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
      }
      break;
    }
    case Op::group_norm: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      const std::size_t B = x.dim(0), C = x.dim(1), hw = spatial(x.shape());
      const auto G = static_cast<std::size_t>(n.groups);
      const std::size_t cpg = C / G, count = cpg * hw;
      const auto& stats = aux_[id];
      double* dx = need(0) ? gin(0) : nullptr;
      double* dgamma = need(1) ? gin(1) : nullptr;
      double* dbeta = need(2) ? gin(2) : nullptr;
      std::vector<double> dxhat(count), xhat(count);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t g = 0; g < G; ++g) {
          const double mu = stats[(b * G + g) * 2], rstd = stats[(b * G + g) * 2 + 1];
          const std::size_t base = (b * C + g * cpg) * hw;
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t c = 0; c < cpg; ++c) {
            const std::size_t ch = g * cpg + c;
            double acc_g = 0.0, acc_b = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = c * hw + i;
              xhat[k] = (x[base + k] - mu) * rstd;
              dxhat[k] = dy[base + k] * gamma[ch];
              sum_dxhat += dxhat[k];
              sum_dxhat_xhat += dxhat[k] * xhat[k];
              acc_g += dy[base + k] * xhat[k];
              acc_b += dy[base + k];
            }
            if (dgamma) dgamma[ch] += acc_g;
            if (dbeta) dbeta[ch] += acc_b;
          }
          if (dx) {
            const double inv_n = 1.0 / static_cast<double>(count);
            for (std::size_t k = 0; k < count; ++k)
              dx[base + k] += rstd * (dxhat[k] - inv_n * sum_dxhat - xhat[k] * inv_n * sum_dxhat_xhat);
          }
        }
      }
      break;
    }
    case Op::mean: {
      if (!need(0)) break;
      double* d = gin(0);
      const std::size_t m = in(0).size();
      const double g = dy[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) d[i] += g;
      break;
    }
    case Op::sum: {
      if (!need(0)) break;
      double* d = gin(0);
      for (std::size_t i = 0; i < in(0).size(); ++i) d[i] += dy[0];
      break;
    }
    case Op::mse: {
      const auto& a = in(0);
      const auto& b = in(1);
      const double g = 2.0 * dy[0] / static_cast<double>(a.size());
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] += g * (a[i] - b[i]);
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] -= g * (a[i] - b[i]);
      }
      break;
    }
    case Op::sum_squares: {
      if (!need(0)) break;
      const auto& x = in(0);
      double* d = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) d[i] += 2.0 * dy[0] * x[i];
      break;
    }
    case Op::row_mean_square: {
      if (!need(0)) break;
      const auto& x = in(0);
      const std::size_t per = x.size() / x.dim(0);
      double* d = gin(0);
      for (std::size_t b = 0; b < x.dim(0); ++b) {
        const double g = 2.0 * dy[b] / static_cast<double>(per);
        for (std::size_t i = 0; i < per; ++i) d[b * per + i] += g * x[b * per + i];
      }
      break;
    }
    case Op::dot: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (need(0)) {
        double* d = gin(0);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] += dy[0] * b[i];
      }
      if (need(1)) {
        double* d = gin(1);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] += dy[0] * a[i];
      }
      break;
    }
    case Op::concat_channels: {
      const auto& a = in(0);
      const auto& b = in(1);
      const std::size_t B = a.dim(0), hw = spatial(a.shape());
      const std::size_t na = a.dim(1) * hw, nb = b.dim(1) * hw;
      double* da = need(0) ? gin(0) : nullptr;
      double* dbp = need(1) ? gin(1) : nullptr;
      for (std::size_t bi = 0; bi < B; ++bi) {
        const double* src = dy + bi * (na + nb);
        if (da)
          for (std::size_t i = 0; i < na; ++i) da[bi * na + i] += src[i];
        if (dbp)
          for (std::size_t i = 0; i < nb; ++i) dbp[bi * nb + i] += src[na + i];
      }
      break;
    }
  }
}

std::vector<std::uint32_t> output_ids(const ComputationGraph& g) {
  std::vector<std::uint32_t> ids;
  for (const auto& [name, id] : g.outputs()) ids.push_back(id);
  return ids;
}

}  // namespace

TensorMap evaluate(const ComputationGraph& graph, const Bindings& bindings) {
  Executor ex(graph, bindings);
  ex.forward(ex.ancestors(output_ids(graph)));
  TensorMap out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, ex.value(id));
  return out;
}

double GradientResult::value() const { return outputs.at(primary).item(); }

GradientResult gradient(const ComputationGraph& graph, const Bindings& bindings,
                        const std::string& output, const std::set<std::string>& wrt) {
  auto it = graph.outputs().find(output);
  if (it == graph.outputs().end()) throw ShapeError("unknown output '" + output + "'");
  const std::uint32_t root = it->second;
  if (shape_size(graph.node(root).shape) != 1)
    throw ShapeError("gradient of non-scalar output '" + output + "' with shape " +
                     shape_string(graph.node(root).shape));
  for (const auto& name : wrt) {
    if (!graph.leaves().count(name)) throw ShapeError("gradient requested for unknown leaf '" + name + "'");
    if (!bindings.contains(name)) throw ShapeError("leaf '" + name + "' is not bound");
  }
  Executor ex(graph, bindings);
  ex.forward(ex.ancestors(output_ids(graph)));
  GradientResult result;
  result.primary = output;
  for (const auto& [name, id] : graph.outputs()) result.outputs.emplace(name, ex.value(id));
  result.gradients = ex.gradients(root, wrt);
  return result;
}

}  // namespace dadt
