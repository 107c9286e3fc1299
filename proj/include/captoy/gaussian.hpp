#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"

namespace captoy {

// Log-variances are clamped to this band everywhere a distribution is built,
// which keeps densities and KL terms finite no matter what a network emits.
inline constexpr double kLogVarClamp = 12.0;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Diagonal Gaussian over R^d, parameterized by mean and log-variance.
struct DiagGaussian {
  Vec mean;
  Vec log_var;

  DiagGaussian() = default;
  DiagGaussian(Vec mu, Vec lv) : mean(std::move(mu)), log_var(std::move(lv)) {
    if (mean.size() != log_var.size())
      throw ConfigError("mean and log-variance dimensions differ");
    for (double& x : log_var) x = std::clamp(x, -kLogVarClamp, kLogVarClamp);
  }

  int dim() const { return static_cast<int>(mean.size()); }

  Vec stddev() const {
    Vec s(mean.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(0.5 * log_var[i]);
    return s;
  }
};

inline DiagGaussian standard_normal(int dim) {
  return DiagGaussian(Vec(static_cast<std::size_t>(dim), 0.0),
                      Vec(static_cast<std::size_t>(dim), 0.0));
}

// z = mu + sigma * eps, the reparameterized draw for a given noise vector.
inline Vec sample_reparam(const DiagGaussian& g, const Vec& eps) {
  if (eps.size() != g.mean.size()) throw ConfigError("noise dimension mismatch");
  Vec z(g.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = g.mean[i] + std::exp(0.5 * g.log_var[i]) * eps[i];
  return z;
}

inline double log_prob(const DiagGaussian& g, const Vec& z) {
  if (z.size() != g.mean.size()) throw ConfigError("point dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double lv = g.log_var[i];
    const double d = z[i] - g.mean[i];
    acc += -0.5 * (kLog2Pi + lv + d * d * std::exp(-lv));
  }
  return acc;
}

// KL(q || p) between diagonal Gaussians, closed form:
//   sum_i 1/2 [ lv_p - lv_q + (v_q + (mu_q - mu_p)^2) / v_p - 1 ]
inline double kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.dim() != p.dim()) throw ConfigError("KL dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.mean.size(); ++i) {
    const double lvq = q.log_var[i];
    const double lvp = p.log_var[i];
    const double d = q.mean[i] - p.mean[i];
    acc += 0.5 * (lvp - lvq + (std::exp(lvq) + d * d) * std::exp(-lvp) - 1.0);
  }
  return acc;
}

// KL(q || N(0, I)), the common special case.
inline double kl_to_standard_normal(const DiagGaussian& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < q.mean.size(); ++i) {
    const double lv = q.log_var[i];
    acc += 0.5 * (std::exp(lv) + q.mean[i] * q.mean[i] - 1.0 - lv);
  }
  return acc;
}

}  // namespace captoy
