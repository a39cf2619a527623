#pragma once

#include "diffheads/conditioning.hpp"
#include "diffheads/core.hpp"
#include "diffheads/denoiser.hpp"
#include "diffheads/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace dh {

struct LossWeights {
  double lambda_vlb = 0.001;
  double lambda_ls = 0.2;

  static constexpr double kLipSyncWarnAbove = 0.5;

  void validate() const {
    require(lambda_vlb >= 0.0 && lambda_ls >= 0.0, "loss weights must be nonnegative");
  }
  std::vector<std::string> warnings() const {
    if (lambda_ls > kLipSyncWarnAbove) {
      return {"lambda_ls = " + std::to_string(lambda_ls) + " exceeds 0.5; expect degraded frame quality"};
    }
    return {};
  }
};

// A scalar loss and its gradient with respect to one network output.
template <typename Scalar>
struct LossGrad {
  double value = 0.0;
  Tensor<Scalar> grad;
};

namespace detail {

// Sum of squared differences over a box, c-major then row-major.
template <typename Scalar>
double box_squared_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Index item, const Box& box) {
  double sum = 0.0;
  for (Index c = 0; c < a.channels; ++c)
    for (Index y = box.y; y < box.y + box.h; ++y)
      for (Index x = box.x; x < box.x + box.w; ++x) {
        const double d = static_cast<double>(a.at(item, c, y, x)) - static_cast<double>(b.at(item, c, y, x));
        sum += d * d;
      }
  return sum;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }
inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

// Mean squared error over every element.
template <typename Scalar>
LossGrad<Scalar> l_simple(const Tensor<Scalar>& eps, const Tensor<Scalar>& eps_pred) {
  require(eps.same_shape(eps_pred), "l_simple: shape mismatch");
  const Box full{0, 0, static_cast<int>(eps.width), static_cast<int>(eps.height)};
  double sum = 0.0;
  for (Index b = 0; b < eps.batch; ++b) sum += detail::box_squared_error(eps_pred, eps, b, full);
  const double n = static_cast<double>(eps.size());
  LossGrad<Scalar> out;
  out.value = sum / n;
  out.grad = eps_pred;
  out.grad.data = (eps_pred.data - eps.data) * static_cast<Scalar>(2.0 / n);
  return out;
}

// Mean squared error inside the mouth box of one batch item, normalized by
// box area times channels.
template <typename Scalar>
LossGrad<Scalar> l_lip_sync(const Tensor<Scalar>& eps, const Tensor<Scalar>& eps_pred, const Box& box,
                            Index item = 0) {
  require(eps.same_shape(eps_pred), "l_lip_sync: shape mismatch");
  require(box.inside(eps.height, eps.width), "l_lip_sync: mouth box empty or outside the frame");
  const double n = static_cast<double>(box.w) * box.h * static_cast<double>(eps.channels);
  LossGrad<Scalar> out;
  out.value = detail::box_squared_error(eps_pred, eps, item, box) / n;
  out.grad = Tensor<Scalar>(eps.batch, eps.channels, eps.height, eps.width);
  for (Index c = 0; c < eps.channels; ++c)
    for (Index y = box.y; y < box.y + box.h; ++y)
      for (Index x = box.x; x < box.x + box.w; ++x)
        out.grad.at(item, c, y, x) =
            static_cast<Scalar>(2.0 / n) * (eps_pred.at(item, c, y, x) - eps.at(item, c, y, x));
  return out;
}

// KL(N(m1, v1) || N(m2, v2)).
inline double kl_gaussian(double mean1, double var1, double mean2, double var2) {
  require(var1 > 0.0 && var2 > 0.0, "kl_gaussian: variances must be positive");
  const double d = mean1 - mean2;
  return 0.5 * (std::log(var2 / var1) + (var1 + d * d) / var2 - 1.0);
}

// log P(bin containing x0) under N(mean, exp(log_var)); bins have half-width
// 1/255 on [-1, 1] and the outermost bins extend to -inf / +inf.
// Also returns the derivative with respect to log_var.
struct BinLogLikelihood {
  double value;
  double d_log_var;
};

inline BinLogLikelihood discretized_gaussian_log_likelihood(double x0, double mean, double log_var) {
  require(x0 >= -1.0 && x0 <= 1.0, "discretized_gaussian_log_likelihood: x0 outside [-1, 1]");
  constexpr double half_bin = 1.0 / 255.0;
  constexpr double floor = 1e-12;
  const double inv_std = std::exp(-0.5 * log_var);
  const double centered = x0 - mean;
  const double plus = inv_std * (centered + half_bin);
  const double minus = inv_std * (centered - half_bin);
  using detail::normal_cdf, detail::normal_pdf, detail::normal_sf;
  if (x0 < -0.999) {
    const double p = normal_cdf(plus);
    if (p <= floor) return {std::log(floor), 0.0};
    return {std::log(p), normal_pdf(plus) * (-0.5 * plus) / p};
  }
  if (x0 > 0.999) {
    const double p = normal_sf(minus);
    if (p <= floor) return {std::log(floor), 0.0};
    return {std::log(p), -normal_pdf(minus) * (-0.5 * minus) / p};
  }
  const double p = minus > 0.0 ? normal_sf(minus) - normal_sf(plus) : normal_cdf(plus) - normal_cdf(minus);
  if (p <= floor) return {std::log(floor), 0.0};
  return {std::log(p), (normal_pdf(plus) * (-0.5 * plus) - normal_pdf(minus) * (-0.5 * minus)) / p};
}

// Variational-bound term for one batch item. The model mean is built from
// eps_pred but treated as a constant, so only nu receives gradient.
template <typename Scalar>
LossGrad<Scalar> l_vlb(const NoiseSchedule& s, const Tensor<Scalar>& x0, const Tensor<Scalar>& xt, int t,
                       const Tensor<Scalar>& eps_pred, const Tensor<Scalar>& nu) {
  s.check(t);
  require(x0.same_shape(xt) && x0.same_shape(eps_pred) && x0.same_shape(nu), "l_vlb: shape mismatch");
  const ModelMoments<Scalar> model = model_mean_variance(s, eps_pred, nu, xt, t);
  const double dlogvar_dnu = std::log(s.beta(t)) - s.posterior_log_variance_clipped(t);
  const double n = static_cast<double>(x0.size());
  LossGrad<Scalar> out;
  out.grad = nu;
  double sum = 0.0;
  if (t == 1) {
    for (Index i = 0; i < x0.size(); ++i) {
      const auto ll = discretized_gaussian_log_likelihood(static_cast<double>(x0.data.data()[i]),
                                                          static_cast<double>(model.mean.data.data()[i]),
                                                          static_cast<double>(model.log_variance.data.data()[i]));
      sum -= ll.value;
      out.grad.data.data()[i] = static_cast<Scalar>(-ll.d_log_var * dlogvar_dnu / n);
    }
  } else {
    const auto post = posterior_mean_variance(s, x0, xt, t);
    const double qvar = post.variance;
    const double qlog = std::log(qvar);
    for (Index i = 0; i < x0.size(); ++i) {
      const double d = static_cast<double>(post.mean.data.data()[i]) - static_cast<double>(model.mean.data.data()[i]);
      const double plog = static_cast<double>(model.log_variance.data.data()[i]);
      const double pvar = std::exp(plog);
      sum += 0.5 * (plog - qlog + (qvar + d * d) / pvar - 1.0);
      out.grad.data.data()[i] = static_cast<Scalar>(0.5 * (1.0 - (qvar + d * d) / pvar) * dlogvar_dnu / n);
    }
  }
  out.value = sum / n;
  return out;
}

struct LossParts {
  double simple = 0.0;
  double vlb = 0.0;
  double lip_sync = 0.0;
  double total = 0.0;
};

inline double total_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  return parts.simple + w.lambda_vlb * parts.vlb + w.lambda_ls * parts.lip_sync;
}

}  // namespace dh
