#include "diffheads/schedule.hpp"
#include "doctest.h"
#include "test_util.hpp"

#include <cmath>

using namespace dh;
using dh::test::fixture_schedule;

namespace {

Tensor<double> scalar_image(double v) { return Tensor<double>::constant(1, 1, 1, 1, v); }

}  // namespace

TEST_SUITE("schedule") {
  TEST_CASE("fixture alpha bars are the running products") {
    const NoiseSchedule s = fixture_schedule();
    const double expected[] = {0.9, 0.72, 0.504, 0.3024};
    for (int t = 1; t <= 4; ++t) CHECK(s.alpha_bar(t) == doctest::Approx(expected[t - 1]).epsilon(1e-12));
    CHECK(s.alpha_bar(0) == 1.0);
  }

  TEST_CASE("fixture posterior variance at t=2") {
    const NoiseSchedule s = fixture_schedule();
    CHECK(std::abs(s.posterior_variance(2) - 0.071429) < 1e-6);
  }

  TEST_CASE("first posterior variance is zero for every kind and length") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
      for (int T : {1, 2, 4, 50, 1000}) CHECK(make_schedule(kind, T).posterior_variance(1) == 0.0);
    CHECK(fixture_schedule().posterior_variance(1) == 0.0);
  }

  TEST_CASE("linear schedule with T=1000 is a nondecreasing ramp") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
    REQUIRE(s.steps() == 1000);
    CHECK(s.beta(1) == doctest::Approx(1e-4));
    CHECK(s.beta(1000) == doctest::Approx(0.02));
    for (int t = 2; t <= 1000; ++t) CHECK(s.beta(t) >= s.beta(t - 1));
  }

  TEST_CASE("schedule invariants hold for both kinds") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      const NoiseSchedule s = make_schedule(kind, 1000);
      for (int t = 1; t <= s.steps(); ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.posterior_variance(t) <= s.beta(t));
      }
    }
  }

  TEST_CASE("q_sample of a zero image is the scaled noise") {
    std::mt19937_64 rng(3);
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 100);
    const auto eps = dh::test::random_tensor<double>(2, 3, 4, 4, rng);
    const Tensor<double> zero(2, 3, 4, 4);
    for (int t : {1, 37, 100}) {
      const auto x = q_sample(s, zero, t, eps);
      CHECK((x.data - std::sqrt(1.0 - s.alpha_bar(t)) * eps.data).cwiseAbs().maxCoeff() <= 1e-15);
    }
  }

  TEST_CASE("q_sample on the fixture, noiseless") {
    const auto x = q_sample(fixture_schedule(), scalar_image(1.0), 2, scalar_image(0.0));
    CHECK(x.data(0, 0) == doctest::Approx(0.84853).epsilon(1e-5));
  }

  TEST_CASE("composed single steps match the one-step marginal") {
    const NoiseSchedule s = fixture_schedule();
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal;
    const double x0 = 0.6;
    const int draws = 10000;
    for (int t = 1; t <= 4; ++t) {
      double sum = 0, sum2 = 0;
      for (int i = 0; i < draws; ++i) {
        double x = x0;
        for (int j = 1; j <= t; ++j) x = std::sqrt(1.0 - s.beta(j)) * x + std::sqrt(s.beta(j)) * normal(rng);
        sum += x;
        sum2 += x * x;
      }
      const double mean = sum / draws;
      const double var = (sum2 - draws * mean * mean) / (draws - 1);
      const double target_var = 1.0 - s.alpha_bar(t);
      CHECK(std::abs(mean - std::sqrt(s.alpha_bar(t)) * x0) < 3.0 * std::sqrt(target_var / draws));
      CHECK(std::abs(var - target_var) < 3.0 * target_var * std::sqrt(2.0 / (draws - 1)));
    }
  }

  TEST_CASE("posterior mean along the noiseless trajectory") {
    const NoiseSchedule s = fixture_schedule();
    const auto x0 = scalar_image(1.0);
    const auto xt = scalar_image(std::sqrt(s.alpha_bar(2)));
    const auto post = posterior_mean_variance(s, x0, xt, 2);
    CHECK(post.mean.data(0, 0) == doctest::Approx(0.94868).epsilon(1e-5));
  }

  TEST_CASE("posterior mean at the noiseless trajectory returns sqrt(abar_{t-1}) x0") {
    std::mt19937_64 rng(5);
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      const NoiseSchedule s = make_schedule(kind, 1000);
      for (int t = 1; t <= 1000; t += 37) {
        const auto x0 = dh::test::random_tensor<double>(1, 3, 4, 4, rng);
        Tensor<double> xt = x0;
        xt.data *= std::sqrt(s.alpha_bar(t));
        const auto post = posterior_mean_variance(s, x0, xt, t);
        CHECK((post.mean.data - std::sqrt(s.alpha_bar(t - 1)) * x0.data).cwiseAbs().maxCoeff() <= 1e-10);
      }
    }
  }

  TEST_CASE("posterior variance at t=1 is zero") {
    std::mt19937_64 rng(6);
    const auto x0 = dh::test::random_tensor<double>(1, 1, 2, 2, rng);
    CHECK(posterior_mean_variance(fixture_schedule(), x0, x0, 1).variance == 0.0);
  }

  TEST_CASE("posterior at t=3 matches an independent transcription") {
    const NoiseSchedule s = fixture_schedule();
    std::mt19937_64 rng(8);
    const auto x0 = dh::test::random_tensor<double>(1, 3, 5, 5, rng);
    const auto xt = dh::test::random_tensor<double>(1, 3, 5, 5, rng, -2.0, 2.0);
    const auto post = posterior_mean_variance(s, x0, xt, 3);
    // abar_2 = 0.72, abar_3 = 0.504, beta_3 = 0.3, alpha_3 = 0.7
    const double c0 = std::sqrt(0.72) * 0.3 / (1.0 - 0.504);
    const double ct = std::sqrt(0.7) * (1.0 - 0.72) / (1.0 - 0.504);
    for (Index i = 0; i < x0.size(); ++i) {
      const double expected = c0 * x0.data.data()[i] + ct * xt.data.data()[i];
      CHECK(std::abs(post.mean.data.data()[i] - expected) <= 1e-12);
    }
    CHECK(std::abs(post.variance - (1.0 - 0.72) / (1.0 - 0.504) * 0.3) <= 1e-12);
  }

  TEST_CASE("predict_x0_from_eps") {
    const NoiseSchedule s = fixture_schedule();
    CHECK(predict_x0_from_eps(s, scalar_image(0.84853), 2, scalar_image(0.0)).data(0, 0) ==
          doctest::Approx(1.0).epsilon(1e-5));
    std::mt19937_64 rng(9);
    const auto xt = dh::test::random_tensor<double>(1, 2, 3, 3, rng);
    const Tensor<double> zero(1, 2, 3, 3);
    for (int t = 1; t <= 4; ++t) {
      const auto x0 = predict_x0_from_eps(s, xt, t, zero);
      CHECK((x0.data - xt.data / std::sqrt(s.alpha_bar(t))).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("q_sample and predict_x0_from_eps round trip at every step") {
    std::mt19937_64 rng(10);
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      const NoiseSchedule s = make_schedule(kind, 1000);
      for (int t = 1; t <= 1000; ++t) {
        const auto x0 = dh::test::random_tensor<double>(1, 1, 2, 2, rng);
        const auto eps = standard_normal_like(x0, rng);
        const auto back = predict_x0_from_eps(s, q_sample(s, x0, t, eps), t, eps);
        REQUIRE((back.data - x0.data).cwiseAbs().maxCoeff() <= 1e-6);
      }
    }
  }

  TEST_CASE("respacing the fixture to steps {2, 4}") {
    const RespacedSchedule r = respace(fixture_schedule(), std::vector<int>{2, 4});
    REQUIRE(r.steps() == 2);
    CHECK(std::abs(r.effective_betas()[0] - 0.28) < 1e-6);
    CHECK(std::abs(r.effective_betas()[1] - 0.58) < 1e-6);
    CHECK(r.base_step(1) == 2);
    CHECK(r.base_step(2) == 4);
    CHECK(respace(fixture_schedule(), 2).used_steps == std::vector<int>{2, 4});
  }

  TEST_CASE("identity respacing keeps betas bitwise") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      const NoiseSchedule s = make_schedule(kind, 1000);
      const RespacedSchedule r = respace(s, 1000);
      REQUIRE(r.steps() == 1000);
      CHECK(std::memcmp(r.effective_betas().data(), s.betas().data(), sizeof(double) * 1000) == 0);
      for (int i = 1; i <= 1000; ++i) CHECK(r.base_step(i) == i);
    }
  }

  TEST_CASE("factor-5 respacing from 1000 to 200 steps") {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 1000);
    const RespacedSchedule r = respace(s, 200);
    REQUIRE(r.steps() == 200);
    for (int i = 1; i <= 200; ++i) {
      CHECK(r.base_step(i) == 5 * i);
      CHECK(r.effective.alpha_bar(i) == doctest::Approx(s.alpha_bar(5 * i)).epsilon(1e-10));
    }
  }

  TEST_CASE("respacing rejects bad step sets") {
    const NoiseSchedule s = fixture_schedule();
    CHECK_THROWS_AS(respace(s, 0), ValidationError);
    CHECK_THROWS_AS(respace(s, 5), ValidationError);
    CHECK_THROWS_AS(respace(s, std::vector<int>{3, 2, 4}), ValidationError);
    CHECK_THROWS_AS(respace(s, std::vector<int>{1, 3}), ValidationError);
  }

  TEST_CASE("step bounds are checked") {
    const NoiseSchedule s = fixture_schedule();
    CHECK_THROWS_AS(s.beta(0), ValidationError);
    CHECK_THROWS_AS(s.beta(5), ValidationError);
    Eigen::VectorXd bad(2);
    bad << 0.1, 1.0;
    CHECK_THROWS_AS(NoiseSchedule::from_betas(bad), ValidationError);
  }
}
