#include <cmath>
#include <limits>

#include "dadt/errors.hpp"
#include "dadt/models.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace dadt;

TEST_CASE("default denoiser respects the parameter bound and preserves shape") {
  Rng init(1);
  DenoiserModel m(UNetConfig{}, default_schedule(), init);
  CHECK(m.parameters().count() <= kMaxDenoiserParameters);
  Rng r(2);
  const Tensor x = r.normal_tensor({2, 3, 32, 32});
  CHECK(m.predict(x, 50).shape() == x.shape());
}

TEST_CASE("denoiser output is finite for every step and inputs in [-3, 3]") {
  Rng init(3);
  DenoiserModel m(testing::tiny_unet(3, 8), default_schedule(), init);
  Rng r(4);
  const Tensor x = r.uniform_tensor({100, 3, 8, 8}, -3.0, 3.0);
  std::vector<int> steps(100);
  for (int t = 1; t <= 100; ++t) steps[static_cast<std::size_t>(t - 1)] = t;
  const Tensor eps = m.predict(x, steps);
  CHECK(eps.shape() == x.shape());
  CHECK(eps.all_finite());
}

TEST_CASE("denoiser rejects inputs outside its space") {
  Rng init(3);
  DenoiserModel m(testing::tiny_unet(3, 8), default_schedule(), init);
  CHECK_THROWS_AS(m.predict(Tensor({1, 2, 8, 8}), 1), ShapeError);
  CHECK_THROWS_AS(m.predict(Tensor({1, 3, 5, 5}), 1), ShapeError);
  // Fully convolutional: other extents of the right parity are accepted.
  CHECK(m.predict(Tensor({1, 3, 4, 4}), 1).shape() == Shape{1, 3, 4, 4});
  UNetConfig bad = testing::tiny_unet(3, 7);
  CHECK_THROWS_AS(DenoiserModel(bad, default_schedule(), init), ConfigError);
}

TEST_CASE("denoiser round-trips through its parameter set") {
  Rng init(5);
  DenoiserModel a(testing::tiny_unet(2, 4), default_schedule(), init);
  DenoiserModel b(a.config(), a.schedule(), a.parameters());
  const Tensor x = Rng(6).normal_tensor({1, 2, 4, 4});
  CHECK(a.predict(x, 7) == b.predict(x, 7));
  ParameterSet wrong = a.parameters();
  wrong.add("den.extra", Tensor({1}));
  CHECK_THROWS_AS(DenoiserModel(a.config(), a.schedule(), wrong), ConfigError);
}

TEST_CASE("autoencoder shapes: 3x32x32 with f=4, c=4 gives 4x8x8") {
  AutoencoderConfig c;
  CHECK(c.factor() == 4);
  CHECK(c.latent_shape() == Shape{4, 8, 8});
  Rng init(7);
  Autoencoder ae(c, init);
  const Tensor x = Rng(8).uniform_tensor({2, 3, 32, 32}, 0, 1);
  const Tensor z = ae.encode(x);
  CHECK(z.shape() == Shape{2, 4, 8, 8});
  CHECK(ae.decode(z).shape() == x.shape());
  CHECK(ae.encode(x) == z);
  CHECK_THROWS_AS(ae.encode(Tensor({1, 3, 16, 16})), ShapeError);
  CHECK_THROWS_AS(ae.decode(Tensor({1, 4, 4, 4})), ShapeError);
}

TEST_CASE("encoder taps are ordered by depth") {
  Rng init(9);
  AutoencoderConfig c = testing::tiny_autoencoder(8);
  c.widths = {4, 6};
  Autoencoder ae(c, init);
  const auto taps = ae.encoder_activations(Rng(1).uniform_tensor({1, 3, 8, 8}, 0, 1));
  REQUIRE(taps.size() >= 2);
  CHECK(taps.front().dim(2) == 8);
  CHECK(taps.back().dim(1) == 6);
  CHECK(taps.back().dim(2) == 2);
}

TEST_CASE("identity autoencoder has zero loss immediately") {
  Autoencoder ae = Autoencoder::identity(3, 8, 8);
  const Tensor x = Rng(2).uniform_tensor({1, 3, 8, 8}, 0, 1);
  CHECK(ae.decode(ae.encode(x)) == x);
  std::vector<Tensor> data{x.batch_item(0).reshaped({3, 8, 8})};
  AutoencoderTrainOptions opt;
  opt.epochs = 1;
  opt.batch = 1;
  Rng r(3);
  const auto rep = train_autoencoder(ae, data, data, opt, r);
  REQUIRE(rep.losses.size() == 1);
  CHECK(rep.losses[0] == 0.0);
  CHECK(rep.holdout_mae == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.passed);
}

TEST_CASE("autoencoder training: deterministic, and the fitted scale normalises latents") {
  std::vector<Tensor> data;
  Rng gen(11);
  for (int i = 0; i < 6; ++i) data.push_back(gen.uniform_tensor({3, 8, 8}, 0, 1));
  AutoencoderTrainOptions opt;
  opt.epochs = 3;
  opt.batch = 2;
  Rng i1(4), i2(4);
  Autoencoder a(testing::tiny_autoencoder(8), i1), b(testing::tiny_autoencoder(8), i2);
  Rng r1(5), r2(5);
  const auto ra = train_autoencoder(a, data, data, opt, r1);
  train_autoencoder(b, data, data, opt, r2);
  CHECK(a.parameters().hash() == b.parameters().hash());
  CHECK(ra.losses.size() == 9);
  CHECK(a.config().latent_scale == ra.latent_scale);

  double sq = 0;
  std::size_t n = 0;
  for (const auto& x : data) {
    const Tensor z = a.encode(x.reshaped({1, 3, 8, 8}));
    for (double v : z.data()) sq += v * v;
    n += z.size();
  }
  CHECK(std::sqrt(sq / static_cast<double>(n)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ra.holdout_mae == doctest::Approx(reconstruction_mae(a, data)).epsilon(1e-12));
}

TEST_CASE("latent scale does not change the reconstruction") {
  Rng init(12);
  Autoencoder ae(testing::tiny_autoencoder(8), init);
  const Tensor x = Rng(1).uniform_tensor({1, 3, 8, 8}, 0, 1);
  const Tensor before = ae.decode(ae.encode(x));
  ae.mutable_config().latent_scale = 2.5;
  CHECK(max_abs_diff(ae.decode(ae.encode(x)), before) < 1e-12);
}

TEST_CASE("gradients flow through decode, denoiser and encode") {
  Rng init(13);
  Autoencoder ae(testing::tiny_autoencoder(8), init);
  DenoiserModel den(testing::tiny_unet(2, 4), default_schedule(), init);
  ComputationGraph g;
  Var x = g.input("x", {1, 3, 8, 8});
  Var t = g.input("t", {1});
  Var z = ae.build_encoder(g, x);
  Var y = ae.build_decoder(g, den.build(g, z, t));
  g.mark_output("loss", g.sum_squares(y));
  Bindings b;
  ae.bind(b);
  den.bind(b);
  const Tensor xv = Rng(2).uniform_tensor({1, 3, 8, 8}, 0, 1);
  b.bind("x", xv);
  b.bind("t", Tensor({1}, 17.0));
  const Tensor grad = gradient(g, b, "loss", {"x"}).gradients.at("x");
  const Tensor fd = finite_difference_gradient(testing::scalar_fn(g, b, "x", "loss"), xv);
  CHECK(relative_error(grad, fd) <= 1e-4);
}

TEST_CASE("latent diffusion model checks the latent space") {
  Rng init(14);
  Autoencoder ae(testing::tiny_autoencoder(8), init);
  CHECK_NOTHROW(LatentDiffusionModel(ae, DenoiserModel(testing::tiny_unet(2, 4), default_schedule(), init)));
  CHECK_THROWS_AS(LatentDiffusionModel(ae, DenoiserModel(testing::tiny_unet(3, 4), default_schedule(), init)),
                  ShapeError);
}

TEST_CASE("ldm_edit") {
  Rng init(15);
  Autoencoder ae(testing::tiny_autoencoder(8), init);
  LatentDiffusionModel ldm(ae, DenoiserModel(testing::tiny_unet(2, 4), default_schedule(), init));
  const Tensor x = Rng(3).uniform_tensor({1, 3, 8, 8}, 0, 1);
  CHECK(ldm_edit(ldm, x, EditConfig{0, 1}) == clamped(ae.decode(ae.encode(x)), 0.0, 1.0));
  const Tensor e = ldm_edit(ldm, x, EditConfig{10, 1});
  CHECK(e.shape() == x.shape());
  CHECK(e == ldm_edit(ldm, x, EditConfig{10, 1}));
  for (double v : e.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("latent amplification") {
  Autoencoder ae = Autoencoder::identity(3, 4, 4);
  const Tensor x = Rng(1).uniform_tensor({1, 3, 4, 4}, 0, 1);
  CHECK(latent_amplification(ae, x, x) == 0.0);

  ae.mutable_config().latent_scale = 3.0;  // z = 3x
  Rng r(2);
  for (int i = 0; i < 5; ++i) {
    const Tensor adv = add(x, scaled(r.normal_tensor(x.shape()), 0.01 * (i + 1)));
    CHECK(latent_amplification(ae, x, adv) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(latent_amplification(ae, x, adv, AmplificationNorm::l2) == doctest::Approx(3.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(latent_amplification(ae, x, Tensor({1, 3, 4, 2})), ShapeError);
}

TEST_CASE("norms") {
  const Tensor t = Tensor::from({3.0, 4.0});
  CHECK(norm_of(t, AmplificationNorm::l2) == doctest::Approx(5.0));
  CHECK(norm_of(t, AmplificationNorm::rms) == doctest::Approx(std::sqrt(12.5)));
}
