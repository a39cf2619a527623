#include "diffheads/losses.hpp"
#include "diffheads/trainer.hpp"
#include "doctest.h"
#include "test_util.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

using namespace dh;

namespace {

double normal_log_pdf(double x, double mean, double var) {
  return -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * (x - mean) * (x - mean) / var;
}

// Composite Simpson over mean1 +- 14 standard deviations.
double kl_quadrature(double m1, double v1, double m2, double v2) {
  const int n = 20000;
  const double s = std::sqrt(v1), a = m1 - 14 * s, b = m1 + 14 * s, h = (b - a) / n;
  double sum = 0;
  for (int i = 0; i <= n; ++i) {
    const double x = a + i * h;
    const double lp = normal_log_pdf(x, m1, v1);
    const double f = std::exp(lp) * (lp - normal_log_pdf(x, m2, v2));
    sum += f * (i == 0 || i == n ? 1 : (i % 2 ? 4 : 2));
  }
  return sum * h / 3;
}

double bin_mass_sum(double mean, double log_var) {
  double total = 0;
  for (int k = 0; k < 256; ++k) {
    const double x = -1.0 + 2.0 * k / 255.0;
    total += std::exp(discretized_gaussian_log_likelihood(std::clamp(x, -1.0, 1.0), mean, log_var).value);
  }
  return total;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("l_simple basics") {
    std::mt19937_64 rng(1);
    const auto eps = dh::test::random_tensor<double>(2, 3, 4, 4, rng);
    CHECK(l_simple(eps, eps).value == 0.0);
    CHECK(l_simple(Tensor<double>(2, 3, 4, 4), Tensor<double>::constant(2, 3, 4, 4, 1.0)).value == 1.0);
  }

  TEST_CASE("l_simple matches an elementwise loop") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
      const auto a = dh::test::random_tensor<double>(3, 3, 5, 4, rng, -3, 3);
      const auto b = dh::test::random_tensor<double>(3, 3, 5, 4, rng, -3, 3);
      double sum = 0;
      Index count = 0;
      for (Index n = 0; n < 3; ++n)
        for (Index c = 0; c < 3; ++c)
          for (Index y = 0; y < 5; ++y)
            for (Index x = 0; x < 4; ++x, ++count) sum += std::pow(a.at(n, c, y, x) - b.at(n, c, y, x), 2);
      CHECK(std::abs(l_simple(a, b).value - sum / count) <= 1e-12);
    }
  }

  TEST_CASE("Gaussian KL closed forms") {
    CHECK(kl_gaussian(0.3, 2.0, 0.3, 2.0) == 0.0);
    CHECK(kl_gaussian(1, 1, 0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(kl_gaussian(0, 4, 0, 1) == doctest::Approx(0.80685).epsilon(1e-5));
    CHECK(kl_gaussian(0, 4, 0, 1) == doctest::Approx(0.5 * (4 - 1 - std::log(4.0))).epsilon(1e-14));
  }

  TEST_CASE("Gaussian KL matches quadrature and is nonnegative") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> mean(-2, 2), logv(-3, 1);
    for (int i = 0; i < 100; ++i) {
      const double m1 = mean(rng), m2 = mean(rng), v1 = std::exp(logv(rng)), v2 = std::exp(logv(rng));
      const double kl = kl_gaussian(m1, v1, m2, v2);
      CHECK(kl >= 0.0);
      CHECK(std::abs(kl - kl_quadrature(m1, v1, m2, v2)) <= 1e-3);
    }
  }

  TEST_CASE("discretized Gaussian bin masses sum to one") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> mean(-1.2, 1.2), logv(-14, 1);
    for (int i = 0; i < 100; ++i) CHECK(std::abs(bin_mass_sum(mean(rng), logv(rng)) - 1.0) <= 1e-6);
  }

  TEST_CASE("narrow Gaussian centred on a bin puts all mass there") {
    for (int k : {0, 1, 100, 254, 255}) {
      const double x = std::clamp(-1.0 + 2.0 * k / 255.0, -1.0, 1.0);
      CHECK(std::exp(discretized_gaussian_log_likelihood(x, x, std::log(1e-8)).value) ==
            doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  TEST_CASE("leftmost bin integrates the tail to minus infinity") {
    const double mean = -1.5, log_var = std::log(0.25);
    const double expected = 0.5 * std::erfc(-((-1.0 + 1.0 / 255.0) - mean) / (0.5 * std::numbers::sqrt2));
    CHECK(std::exp(discretized_gaussian_log_likelihood(-1.0, mean, log_var).value) ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("bound term vanishes when the model matches the posterior") {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 50);
    std::mt19937_64 rng(5);
    for (int t = 2; t <= 50; ++t) {
      const auto x0 = dh::test::random_tensor<double>(1, 3, 4, 4, rng);
      const auto eps = standard_normal_like(x0, rng);
      const auto xt = q_sample(s, x0, t, eps);
      CHECK(std::abs(l_vlb(s, x0, xt, t, eps, Tensor<double>(1, 3, 4, 4)).value) <= 1e-10);
    }
  }

  TEST_CASE("bound term with matched means and variance beta_t") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 100);
    std::mt19937_64 rng(6);
    for (int t : {2, 10, 50, 100}) {
      const auto x0 = dh::test::random_tensor<double>(1, 3, 4, 4, rng);
      const auto eps = standard_normal_like(x0, rng);
      const auto xt = q_sample(s, x0, t, eps);
      const double r = s.posterior_variance(t) / s.beta(t);
      const double expected = 0.5 * (r - 1 - std::log(r));
      CHECK(l_vlb(s, x0, xt, t, eps, Tensor<double>::constant(1, 3, 4, 4, 1.0)).value ==
            doctest::Approx(expected).epsilon(1e-9));
    }
  }

  TEST_CASE("bound term matches quadrature on scalar cases") {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 100);
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> pick(2, 100);
    for (int i = 0; i < 20; ++i) {
      const int t = pick(rng);
      const auto x0 = dh::test::random_tensor<double>(1, 1, 1, 1, rng);
      const auto xt = dh::test::random_tensor<double>(1, 1, 1, 1, rng, -2, 2);
      const auto eps_pred = dh::test::random_tensor<double>(1, 1, 1, 1, rng, -2, 2);
      const auto nu = dh::test::random_tensor<double>(1, 1, 1, 1, rng, 0, 1);
      const auto post = posterior_mean_variance(s, x0, xt, t);
      const auto model = model_mean_variance(s, eps_pred, nu, xt, t);
      const double quad =
          kl_quadrature(post.mean.data(0, 0), post.variance, model.mean.data(0, 0), model.variance.data(0, 0));
      CHECK(std::abs(l_vlb(s, x0, xt, t, eps_pred, nu).value - quad) <= 1e-3);
    }
  }

  TEST_CASE("bound term gradient reaches nu only and matches differences") {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 20);
    std::mt19937_64 rng(8);
    for (int t : {1, 2, 7, 20}) {
      const auto x0 = dh::test::random_tensor<double>(1, 2, 3, 3, rng);
      const auto eps = standard_normal_like(x0, rng);
      const auto xt = q_sample(s, x0, t, eps);
      const auto eps_pred = dh::test::random_tensor<double>(1, 2, 3, 3, rng);
      auto nu = dh::test::random_tensor<double>(1, 2, 3, 3, rng, 0.05, 0.95);
      const auto lg = l_vlb(s, x0, xt, t, eps_pred, nu);
      CHECK(lg.grad.same_shape(nu));
      for (Index i = 0; i < nu.size(); ++i) {
        const double keep = nu.data.data()[i], h = 1e-4;
        nu.data.data()[i] = keep + h;
        const double up = l_vlb(s, x0, xt, t, eps_pred, nu).value;
        nu.data.data()[i] = keep - h;
        const double down = l_vlb(s, x0, xt, t, eps_pred, nu).value;
        nu.data.data()[i] = keep;
        INFO("t = " << t << ", value " << lg.value);
        CHECK(lg.grad.data.data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5).scale(1e-4));
      }
    }
  }

  TEST_CASE("bound term adds no gradient through the noise prediction") {
    // Perturbing eps_pred changes the bound, yet the batch gradient with
    // respect to eps_pred is the simple-loss gradient alone.
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 20);
    std::mt19937_64 rng(9);
    TrainingBatch<double> batch;
    batch.x0 = dh::test::random_tensor<double>(2, 3, 4, 4, rng);
    batch.eps = standard_normal_like(batch.x0, rng);
    batch.input.timesteps = {3, 9};
    batch.xt = batch.x0;
    for (Index b = 0; b < 2; ++b)
      batch.xt.item(b) = q_sample(s, batch.x0.slice(b), batch.input.timesteps[b], batch.eps.slice(b)).data;
    batch.boxes = {Box{0, 0, 2, 2}, Box{1, 1, 2, 2}};
    DenoiserOutput<double> out;
    out.eps_pred = dh::test::random_tensor<double>(2, 3, 4, 4, rng);
    out.nu = dh::test::random_tensor<double>(2, 3, 4, 4, rng, 0, 1);
    const auto with_vlb = compute_losses(s, batch, out, LossWeights{1.0, 0.0});
    const auto simple = l_simple(batch.eps, out.eps_pred);
    CHECK(dh::test::bitwise_equal(with_vlb.d_eps.data, simple.grad.data));
    DenoiserOutput<double> moved = out;
    moved.eps_pred.data.array() += 0.1;
    const double before = l_vlb(s, batch.x0.slice(0), batch.xt.slice(0), 3, out.eps_pred.slice(0), out.nu.slice(0)).value;
    const double after = l_vlb(s, batch.x0.slice(0), batch.xt.slice(0), 3, moved.eps_pred.slice(0), out.nu.slice(0)).value;
    CHECK(before != after);
  }

  TEST_CASE("lip-sync loss with a full-frame box is the simple loss, bitwise") {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<int> size(1, 9);
    for (int i = 0; i < 100; ++i) {
      const Index h = size(rng), w = size(rng), c = 1 + i % 3;
      const auto eps = dh::test::random_tensor<float>(1, c, h, w, rng, -3, 3);
      const auto pred = dh::test::random_tensor<float>(1, c, h, w, rng, -3, 3);
      const auto lip = l_lip_sync(eps, pred, Box{0, 0, static_cast<int>(w), static_cast<int>(h)});
      const auto simple = l_simple(eps, pred);
      CHECK(std::memcmp(&lip.value, &simple.value, sizeof(double)) == 0);
      CHECK(dh::test::bitwise_equal(lip.grad.data, simple.grad.data));
    }
  }

  TEST_CASE("lip-sync loss only sees the box") {
    std::mt19937_64 rng(11);
    const auto eps = dh::test::random_tensor<double>(1, 3, 8, 8, rng);
    auto pred = dh::test::random_tensor<double>(1, 3, 8, 8, rng);
    const Box box{2, 3, 4, 2};
    for (Index c = 0; c < 3; ++c)
      for (Index y = 3; y < 5; ++y)
        for (Index x = 2; x < 6; ++x) pred.at(0, c, y, x) = eps.at(0, c, y, x);
    CHECK(l_lip_sync(eps, pred, box).value == 0.0);
  }

  TEST_CASE("lip-sync loss on a quarter box matches a loop") {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 20; ++i) {
      const auto eps = dh::test::random_tensor<double>(2, 3, 8, 8, rng, -3, 3);
      const auto pred = dh::test::random_tensor<double>(2, 3, 8, 8, rng, -3, 3);
      const Box box{i % 5, (i / 5) % 5, 4, 4};
      const Index item = i % 2;
      double sum = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = box.y; y < box.y + 4; ++y)
          for (int x = box.x; x < box.x + 4; ++x) sum += std::pow(eps.at(item, c, y, x) - pred.at(item, c, y, x), 2);
      CHECK(std::abs(l_lip_sync(eps, pred, box, item).value - sum / 48.0) <= 1e-12);
    }
  }

  TEST_CASE("lip-sync loss rejects boxes outside the frame") {
    const Tensor<float> a(1, 3, 4, 4);
    CHECK_THROWS_AS(l_lip_sync(a, a, Box{2, 2, 3, 1}), ValidationError);
    CHECK_THROWS_AS(l_lip_sync(a, a, Box{0, 0, 0, 1}), ValidationError);
  }

  TEST_CASE("total loss weighting") {
    const LossParts parts{0.7, 3.0, 1.5, 0.0};
    CHECK(total_loss(parts, LossWeights{0.0, 0.0}) == 0.7);
    CHECK(total_loss(LossParts{}, LossWeights{}) == 0.0);
    CHECK(total_loss(parts, LossWeights{0.001, 0.2}) == doctest::Approx(0.7 + 0.003 + 0.3));
    double prev = -1;
    for (double l = 0; l <= 2.0; l += 0.25) {
      const double vlb = total_loss(parts, LossWeights{l, 0.2});
      const double ls = total_loss(parts, LossWeights{0.001, l});
      CHECK(vlb >= prev);
      CHECK(ls >= total_loss(parts, LossWeights{0.001, std::max(0.0, l - 0.25)}));
      prev = vlb;
    }
    CHECK_THROWS_AS(total_loss(parts, LossWeights{-0.1, 0.2}), ValidationError);
  }

  TEST_CASE("default and shipped weights") {
    CHECK(LossWeights{}.lambda_ls == 0.2);
    CHECK(LossWeights{}.lambda_vlb == 0.001);
    CHECK(LossWeights{}.warnings().empty());
    CHECK(LossWeights{0.001, 0.6}.warnings().size() == 1);
    std::ifstream in(std::string(DH_SOURCE_DIR) + "/configs/train_desk.json");
    REQUIRE(in.good());
    const TrainConfig cfg = train_config_from_json(nlohmann::json::parse(in));
    CHECK(cfg.weights.lambda_ls == 0.2);
  }
}
