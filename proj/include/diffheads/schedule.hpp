#pragma once

#include "diffheads/core.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace dh {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

// Per-step diffusion constants. Steps are 1-based: beta(1) .. beta(T), and
// alpha_bar(0) is defined as 1. Always held in double precision.
class NoiseSchedule {
 public:
  // Builds from an explicit beta sequence; every beta must lie in (0, 1).
  static NoiseSchedule from_betas(const Eigen::VectorXd& betas, ScheduleKind kind = ScheduleKind::linear);

  int steps() const { return static_cast<int>(betas_.size()); }
  ScheduleKind kind() const { return kind_; }

  double beta(int t) const { return betas_[check(t) - 1]; }
  double alpha(int t) const { return alphas_[check(t) - 1]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_[check(t) - 1]; }
  double posterior_variance(int t) const { return posterior_variances_[check(t) - 1]; }
  // log of the posterior variance with the t=1 entry floored to t=2's value.
  double posterior_log_variance_clipped(int t) const;

  const Eigen::VectorXd& betas() const { return betas_; }
  const Eigen::VectorXd& alphas() const { return alphas_; }
  const Eigen::VectorXd& alpha_bars() const { return alpha_bars_; }
  const Eigen::VectorXd& posterior_variances() const { return posterior_variances_; }

  int check(int t) const {
    require(t >= 1 && t <= steps(), "timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return t;
  }

 private:
  ScheduleKind kind_ = ScheduleKind::linear;
  Eigen::VectorXd betas_, alphas_, alpha_bars_, posterior_variances_;
};

// Linear ramp 1e-4 .. 0.02, or the squared-cosine alpha-bar schedule.
NoiseSchedule make_schedule(ScheduleKind kind, int steps);

// A schedule restricted to a strictly increasing subset of the base steps.
// `effective` is an ordinary schedule over steps 1..used_steps.size(); its
// step i corresponds to base step used_steps[i-1].
struct RespacedSchedule {
  NoiseSchedule base;
  std::vector<int> used_steps;
  NoiseSchedule effective;

  int steps() const { return static_cast<int>(used_steps.size()); }
  int base_step(int i) const { return used_steps.at(static_cast<std::size_t>(effective.check(i) - 1)); }
  const Eigen::VectorXd& effective_betas() const { return effective.betas(); }
};

// Evenly spaced subsequence of `num_steps` base steps ending at T.
RespacedSchedule respace(const NoiseSchedule& schedule, int num_steps);
RespacedSchedule respace(const NoiseSchedule& schedule, const std::vector<int>& used_steps);

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename Scalar>
Tensor<Scalar> q_sample(const NoiseSchedule& s, const Tensor<Scalar>& x0, int t, const Tensor<Scalar>& eps) {
  require(x0.same_shape(eps), "q_sample: eps shape differs from x0");
  const double ab = s.alpha_bar(s.check(t));
  Tensor<Scalar> out = x0;
  out.data = static_cast<Scalar>(std::sqrt(ab)) * x0.data + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps.data;
  return out;
}

template <typename Scalar>
struct PosteriorMoments {
  Tensor<Scalar> mean;
  double variance = 0.0;
};

template <typename Scalar>
PosteriorMoments<Scalar> posterior_mean_variance(const NoiseSchedule& s, const Tensor<Scalar>& x0,
                                                 const Tensor<Scalar>& xt, int t) {
  require(x0.same_shape(xt), "posterior_mean_variance: x0 and x_t differ in shape");
  s.check(t);
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  PosteriorMoments<Scalar> out;
  out.mean = x0;
  out.mean.data = static_cast<Scalar>(c0) * x0.data + static_cast<Scalar>(ct) * xt.data;
  out.variance = s.posterior_variance(t);
  return out;
}

template <typename Scalar>
Tensor<Scalar> predict_x0_from_eps(const NoiseSchedule& s, const Tensor<Scalar>& xt, int t, const Tensor<Scalar>& eps) {
  require(xt.same_shape(eps), "predict_x0_from_eps: shape mismatch");
  const double ab = s.alpha_bar(s.check(t));
  Tensor<Scalar> out = xt;
  out.data = (xt.data - static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps.data) / static_cast<Scalar>(std::sqrt(ab));
  return out;
}

// Serializable description sufficient to rebuild a schedule.
struct ScheduleDescriptor {
  ScheduleKind kind = ScheduleKind::cosine;
  int steps = 1000;
  NoiseSchedule build() const { return make_schedule(kind, steps); }
};

}  // namespace dh
