#include <cmath>

#include "dadt/diffusion.hpp"
#include "dadt/errors.hpp"
#include "dadt/models.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace dadt;
using testing::EpsOracle;

namespace {

/// eps_theta = 0 everywhere.
class ZeroPredictor : public NoisePredictor {
 public:
  Var build(ComputationGraph& g, Var x_t, Var) const override { return g.scale(x_t, 0.0); }
};

/// Counts predict() calls through build().
class CountingPredictor : public NoisePredictor {
 public:
  Var build(ComputationGraph& g, Var x_t, Var) const override {
    ++calls;
    return g.scale(x_t, 0.0);
  }
  mutable int calls = 0;
};

}  // namespace

TEST_CASE("linear schedule: two-step hand values") {
  const auto s = make_linear_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("linear schedule: constant betas") {
  const auto s = make_linear_schedule(100, 1e-4, 1e-4);
  CHECK(s.alpha_bar(100) == doctest::Approx(0.99005).epsilon(1e-5));
}

TEST_CASE("schedule invariants") {
  for (const auto& s : {default_schedule(), make_linear_schedule(50, 1e-3, 0.3), make_linear_schedule(2, 0.5, 0.5)}) {
    for (int t = 1; t <= s.steps; ++t) {
      CHECK(s.alpha(t) == 1.0 - s.beta(t));
      CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      CHECK(s.posterior_variance(t) >= 0.0);
      if (t > 1) CHECK(s.beta(t) >= s.beta(t - 1));
    }
  }
  CHECK(default_schedule().steps == 100);
  CHECK(default_schedule().alpha_bar(100) < 0.01);
}

TEST_CASE("schedule preconditions") {
  CHECK_THROWS_AS(make_linear_schedule(1, 0.1, 0.2), ConfigError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.2), ConfigError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.2), ConfigError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ConfigError);
}

TEST_CASE("q_sample closed form") {
  CHECK(q_sample_at(Tensor::scalar(1.0), 0.72, Tensor::scalar(-1.0)).item() ==
        doctest::Approx(std::sqrt(0.72) - std::sqrt(0.28)).epsilon(1e-15));
  CHECK(q_sample_at(Tensor::scalar(1.0), 0.72, Tensor::scalar(-1.0)).item() == doctest::Approx(0.31937).epsilon(1e-4));
  const Tensor x = Tensor::from({0.2, -0.4}), e = Tensor::from({1.0, 3.0});
  CHECK(q_sample_at(x, 1.0, e) == x);
  CHECK(q_sample_at(x, 0.0, e) == e);
  CHECK_THROWS_AS(q_sample(x, 1, Tensor::from({1.0}), default_schedule()), ShapeError);
  CHECK_THROWS_AS(q_sample(x, 0, e, default_schedule()), ConfigError);
}

TEST_CASE("q_sample is affine: the clean component scales by sqrt(abar)") {
  const auto s = default_schedule();
  Rng rng(4);
  const Tensor x = rng.normal_tensor({8}), e = rng.normal_tensor({8});
  const Tensor zero(Shape{8});
  const int t = 37;
  const Tensor both = q_sample(x, t, e, s);
  const Tensor noise_only = q_sample(zero, t, e, s);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(both[i] - noise_only[i] == doctest::Approx(std::sqrt(s.alpha_bar(t)) * x[i]).epsilon(1e-12));
}

TEST_CASE("forward process variance matches 1 - abar (MC, 1e4 draws)") {
  const auto s = default_schedule();
  Rng rng(9);
  const Tensor x0 = Tensor::from({0.3, 0.7});
  for (int t : {1, 10, 50, 100}) {
    const int n = 10000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double v = q_sample(x0, t, rng.normal_tensor({2}), s)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(var == doctest::Approx(1.0 - s.alpha_bar(t)).epsilon(0.05));
  }
}

TEST_CASE("training loss: oracle, zero predictor and weighting") {
  const auto s = default_schedule();
  Rng rng(1);
  const Tensor x0 = rng.uniform_tensor({4, 3, 4, 4}, 0, 1);
  EpsOracle oracle;
  Rng r1(5);
  auto l = training_loss(oracle, x0, s, r1);
  CHECK(evaluate(l.graph, l.bindings).at("loss").item() == 0.0);

  ZeroPredictor zero;
  double total = 0;
  Rng r2(6);
  for (int i = 0; i < 400; ++i) {
    auto lz = training_loss(zero, x0, s, r2);
    total += evaluate(lz.graph, lz.bindings).at("loss").item();
  }
  // 400 * 4 * 48 = 76800 standard normal squares.
  CHECK(total / 400 == doctest::Approx(1.0).epsilon(0.02));

  Rng ra(8), rb(8);
  auto one = training_loss(zero, x0, s, ra);
  auto two = training_loss(zero, x0, s, rb, [](int) { return 2.0; });
  CHECK(evaluate(two.graph, two.bindings).at("loss").item() ==
        doctest::Approx(2.0 * evaluate(one.graph, one.bindings).at("loss").item()).epsilon(1e-15));
}

TEST_CASE("training loss exposes gradients for x0") {
  Rng rng(2);
  DenoiserModel model(testing::tiny_unet(2, 4), default_schedule(), rng);
  const Tensor x0 = rng.normal_tensor({1, 2, 4, 4});
  auto l = training_loss(model, x0, default_schedule(), rng);
  const auto r = gradient(l.graph, l.bindings, "loss", {"x0"});
  const Tensor fd = finite_difference_gradient(testing::scalar_fn(l.graph, l.bindings, "x0", "loss"), x0);
  CHECK(relative_error(r.gradients.at("x0"), fd) <= 1e-4);
}

TEST_CASE("train: overfits a single image and is deterministic") {
  const auto s = default_schedule();
  UNetConfig cfg = testing::tiny_unet(3, 8);
  cfg.widths = {8, 16};
  cfg.time_dim = 16;
  Rng init(3);
  DenoiserModel a(cfg, s, init);
  DenoiserModel b = a;
  const std::vector<Tensor> data{Rng(4).uniform_tensor({3, 8, 8}, 0, 1)};
  TrainOptions opt;
  opt.epochs = 500;
  opt.batch = 1;
  opt.lr = 3e-3;
  Rng ra(10), rb(10);
  const auto rep = train(a, data, s, opt, ra);
  train(b, data, s, opt, rb);
  CHECK(rep.losses.size() == 500);
  CHECK(rep.improved());
  CHECK(rep.final_mean < 0.1 * rep.initial_mean);
  CHECK(a.parameters().hash() == b.parameters().hash());
}

TEST_CASE("train: zero epochs leaves the model unchanged") {
  Rng init(3);
  DenoiserModel m(testing::tiny_unet(3, 8), default_schedule(), init);
  const auto before = m.parameters().hash();
  const std::vector<Tensor> data{Rng(4).uniform_tensor({3, 8, 8}, 0, 1)};
  TrainOptions opt;
  opt.epochs = 0;
  Rng r(1);
  train(m, data, default_schedule(), opt, r);
  CHECK(m.parameters().hash() == before);
  CHECK_THROWS_AS(train(m, std::vector<Tensor>{}, default_schedule(), opt, r), ConfigError);
}

TEST_CASE("denoise_step: oracle recovers the posterior mean") {
  const auto s = default_schedule();
  Rng rng(12);
  const Tensor x0 = rng.normal_tensor({1, 1, 2, 2});
  const Tensor eps = rng.normal_tensor(x0.shape());
  for (int t : {1, 5, 60}) {
    const Tensor xt = q_sample(x0, t, eps, s);
    testing::ConstantPredictor oracle(eps);
    const Tensor mean = posterior_mean(oracle, xt, t, s);
    // True posterior mean of q(x_{t-1} | x_t, x0).
    const double ab = s.alpha_bar(t), ab1 = s.alpha_bar(t - 1);
    for (std::size_t i = 0; i < xt.size(); ++i) {
      const double expected = std::sqrt(ab1) * s.beta(t) / (1 - ab) * x0[i] +
                              std::sqrt(s.alpha(t)) * (1 - ab1) / (1 - ab) * xt[i];
      CHECK(mean[i] == doctest::Approx(expected).epsilon(1e-10));
    }
  }
  testing::ConstantPredictor oracle(eps);
  Rng r1(1), r2(2);
  const Tensor xt = q_sample(x0, 1, eps, s);
  CHECK(denoise_step(oracle, xt, 1, s, r1) == denoise_step(oracle, xt, 1, s, r2));
}

TEST_CASE("sample: minimal chain and determinism") {
  const auto s1 = make_linear_schedule(2, 0.1, 0.2);
  ZeroPredictor zero;
  Rng a(1), b(1);
  CHECK(sample(zero, {1, 1, 2, 2}, s1, a) == sample(zero, {1, 1, 2, 2}, s1, b));
  CountingPredictor counter;
  Rng c(3);
  sample(counter, {1, 1, 2, 2}, s1, c);
  CHECK(counter.calls == 2);
}

TEST_CASE("sdedit") {
  const auto s = default_schedule();
  Rng rng(2);
  DenoiserModel m(testing::tiny_unet(3, 8), s, rng);
  const Tensor x = rng.uniform_tensor({1, 3, 8, 8}, 0, 1);
  Rng r(1);
  CHECK(sdedit(m, x, 0, s, r) == x);
  CHECK(sdedit(m, x, EditConfig{0, 5}, s) == x);
  CHECK(sdedit(m, x, EditConfig{7, 5}, s) == sdedit(m, x, EditConfig{7, 5}, s));
  CHECK(sdedit(m, x, EditConfig{7, 5}, s).shape() == x.shape());

  CountingPredictor counter;
  Rng c(4);
  sdedit(counter, x, 10, s, c);
  CHECK(counter.calls == 10);

  CHECK_THROWS_AS(sdedit(m, x, 101, s, r), ConfigError);
  CHECK_THROWS_AS(sdedit(m, x, -1, s, r), ConfigError);
}

TEST_CASE("unrolled sdedit chain reproduces sdedit and is differentiable") {
  const auto s = default_schedule();
  Rng rng(5);
  DenoiserModel m(testing::tiny_unet(2, 4), s, rng);
  const Tensor x = rng.uniform_tensor({1, 2, 4, 4}, 0, 1);
  Rng a(3), b(3);
  const Tensor direct = sdedit(m, x, 3, s, a);
  ComputationGraph g;
  Var xv = g.input("x", x.shape());
  Var out = build_sdedit_chain(g, m, xv, 3, s, b);
  g.mark_output("y", out);
  g.mark_output("loss", g.sum_squares(out));
  Bindings bind;
  m.bind(bind);
  bind.bind("x", x);
  CHECK(max_abs_diff(evaluate(g, bind).at("y"), direct) <= 1e-12);
  const Tensor grad = gradient(g, bind, "loss", {"x"}).gradients.at("x");
  const Tensor fd = finite_difference_gradient(testing::scalar_fn(g, bind, "x", "loss"), x);
  CHECK(relative_error(grad, fd) <= 1e-4);
}
