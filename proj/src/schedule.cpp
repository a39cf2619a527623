#include "diffheads/schedule.hpp"

#include <numbers>

namespace dh {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ValidationError("unknown schedule kind '" + name + "'");
}

NoiseSchedule NoiseSchedule::from_betas(const Eigen::VectorXd& betas, ScheduleKind kind) {
  require(betas.size() >= 1, "schedule needs at least one step");
  for (Index i = 0; i < betas.size(); ++i) {
    require(betas[i] > 0.0 && betas[i] < 1.0,
            "beta at step " + std::to_string(i + 1) + " outside (0, 1): " + std::to_string(betas[i]));
  }
  NoiseSchedule s;
  s.kind_ = kind;
  s.betas_ = betas;
  s.alphas_ = (1.0 - betas.array()).matrix();
  s.alpha_bars_.resize(betas.size());
  s.posterior_variances_.resize(betas.size());
  double running = 1.0;
  for (Index i = 0; i < betas.size(); ++i) {
    const double prev = running;
    running *= s.alphas_[i];
    s.alpha_bars_[i] = running;
    s.posterior_variances_[i] = (1.0 - prev) / (1.0 - running) * betas[i];
  }
  return s;
}

double NoiseSchedule::posterior_log_variance_clipped(int t) const {
  check(t);
  if (t == 1) {
    // Single-step schedules have no second entry; fall back to beta_1.
    return steps() >= 2 ? std::log(posterior_variances_[1]) : std::log(betas_[0]);
  }
  return std::log(posterior_variances_[t - 1]);
}

NoiseSchedule make_schedule(ScheduleKind kind, int steps) {
  require(steps >= 1, "schedule step count must be >= 1, got " + std::to_string(steps));
  Eigen::VectorXd betas(steps);
  if (kind == ScheduleKind::linear) {
    if (steps == 1) {
      betas[0] = 1e-4;
    } else {
      betas = Eigen::VectorXd::LinSpaced(steps, 1e-4, 0.02);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double v = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return v * v;
    };
    const double f0 = f(0.0);
    for (int i = 0; i < steps; ++i) {
      const double ab_next = f(i + 1.0) / f0, ab = f(static_cast<double>(i)) / f0;
      betas[i] = std::min(1.0 - ab_next / ab, 0.999);
    }
  }
  return NoiseSchedule::from_betas(betas, kind);
}

RespacedSchedule respace(const NoiseSchedule& schedule, int num_steps) {
  const int T = schedule.steps();
  require(num_steps >= 1 && num_steps <= T,
          "respaced step count " + std::to_string(num_steps) + " outside [1, " + std::to_string(T) + "]");
  std::vector<int> used(static_cast<std::size_t>(num_steps));
  for (int i = 1; i <= num_steps; ++i) {
    used[static_cast<std::size_t>(i - 1)] = static_cast<int>((static_cast<long long>(i) * T + num_steps - 1) / num_steps);
  }
  return respace(schedule, used);
}

RespacedSchedule respace(const NoiseSchedule& schedule, const std::vector<int>& used_steps) {
  require(!used_steps.empty(), "respace: no steps selected");
  require(used_steps.back() == schedule.steps(), "respace: last used step must be T");
  Eigen::VectorXd betas(static_cast<Index>(used_steps.size()));
  int prev = 0;
  for (std::size_t i = 0; i < used_steps.size(); ++i) {
    const int s = used_steps[i];
    require(s > prev && s <= schedule.steps(), "respace: used steps must be strictly increasing within [1, T]");
    betas[static_cast<Index>(i)] = 1.0 - schedule.alpha_bar(s) / schedule.alpha_bar(prev);
    prev = s;
  }
  // Identity respacing keeps the base betas bit for bit.
  if (static_cast<int>(used_steps.size()) == schedule.steps()) betas = schedule.betas();
  return RespacedSchedule{schedule, used_steps, NoiseSchedule::from_betas(betas, schedule.kind())};
}

}  // namespace dh
