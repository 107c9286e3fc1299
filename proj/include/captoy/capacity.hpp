#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/gaussian.hpp"
#include "captoy/matrix.hpp"
#include "captoy/model.hpp"
#include "captoy/rng.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

// Mixture components whose log density falls this far below the running
// maximum contribute less than 3e-20 relatively and are skipped.
inline constexpr double kLogSumExpSkip = 45.0;

struct GridSpec {
  Vec lo, hi;
  int points_per_axis = 0;
};

enum class MiMethod { quadrature, monte_carlo };

// The three capacity quantities: average rate, representational mutual
// information, and the marginal KL that makes up the difference between them.
struct CapacityReport {
  double r_avg = 0.0;
  double i_q = 0.0;
  double aggregate_kl = 0.0;
  MiMethod method = MiMethod::quadrature;
  double mc_std_err = 0.0;   // Monte Carlo only
  GridSpec grid;             // quadrature only
  double error_bound = 0.0;  // quadrature only: Richardson half-resolution estimate
  bool reliable = true;
};

struct QuadratureOptions {
  int points_per_axis = 512;
  double tolerance = 1e-4;  // error bound above this marks the report unreliable
};

namespace detail {

inline double log_standard_normal(const double* z, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) acc += z[i] * z[i];
  return -0.5 * (acc + dim * kLog2Pi);
}

struct QuadAccum {
  double i_q = 0.0;
  double agg = 0.0;
  // Same integrals restricted to the inner sub-box; the difference estimates
  // how much the integrand still carries near the domain boundary, which in
  // turn dominates the mass lost outside the box entirely.
  double i_q_inner = 0.0;
  double agg_inner = 0.0;
};

// Midpoint-rule sweep shared by every quadrature quantity. For each grid
// point, `log_density(n, z)` must return log q(z | x_n); the aggregated
// mixture is the uniform average over the n components.
//
//   i_q = mean_n  integral q(z|x_n) [log q(z|x_n) - log q(z)] dz
//   agg = integral q(z) [log q(z) - log p(z)] dz.
template <class LogDensityFn>
QuadAccum quad_sweep(int n, int dim, const Vec& lo, const Vec& hi,
                     const Vec& inner_lo, const Vec& inner_hi, int grid,
                     LogDensityFn&& log_density) {
  std::vector<int> idx(static_cast<std::size_t>(dim), 0);
  Vec z(static_cast<std::size_t>(dim), 0.0);
  Vec h(static_cast<std::size_t>(dim), 0.0);
  double log_w = 0.0;
  for (int d = 0; d < dim; ++d) {
    h[static_cast<std::size_t>(d)] = (hi[static_cast<std::size_t>(d)] - lo[static_cast<std::size_t>(d)]) / grid;
    log_w += std::log(h[static_cast<std::size_t>(d)]);
  }
  const double w = std::exp(log_w);

  std::vector<double> logq(static_cast<std::size_t>(n), 0.0);
  QuadAccum acc;
  const double log_n = std::log(static_cast<double>(n));

  while (true) {
    bool inner = true;
    for (int d = 0; d < dim; ++d) {
      z[static_cast<std::size_t>(d)] = lo[static_cast<std::size_t>(d)] + (idx[static_cast<std::size_t>(d)] + 0.5) * h[static_cast<std::size_t>(d)];
      if (z[static_cast<std::size_t>(d)] < inner_lo[static_cast<std::size_t>(d)] ||
          z[static_cast<std::size_t>(d)] > inner_hi[static_cast<std::size_t>(d)])
        inner = false;
    }

    double max_lq = -1e300;
    for (int c = 0; c < n; ++c) {
      logq[static_cast<std::size_t>(c)] = log_density(c, z.data());
      max_lq = std::max(max_lq, logq[static_cast<std::size_t>(c)]);
    }
    double mix = 0.0;
    for (int c = 0; c < n; ++c) {
      const double l = logq[static_cast<std::size_t>(c)];
      if (l > max_lq - kLogSumExpSkip) mix += std::exp(l - max_lq);
    }
    const double log_mix = max_lq + std::log(mix) - log_n;  // log q(z)

    double point_iq = 0.0;
    for (int c = 0; c < n; ++c) {
      const double l = logq[static_cast<std::size_t>(c)];
      if (l > max_lq - kLogSumExpSkip) point_iq += std::exp(l) * (l - log_mix);
    }
    const double d_iq = w * point_iq / n;
    const double d_agg = w * std::exp(log_mix) * (log_mix - log_standard_normal(z.data(), dim));
    acc.i_q += d_iq;
    acc.agg += d_agg;
    if (inner) {
      acc.i_q_inner += d_iq;
      acc.agg_inner += d_agg;
    }

    int d = 0;
    for (; d < dim; ++d) {
      if (++idx[static_cast<std::size_t>(d)] < grid) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
    if (d == dim) break;
  }
  return acc;
}

// Per-dimension union of the components' +-`sigmas` boxes.
inline void component_bounds(const std::vector<DiagGaussian>& comps, double sigmas,
                             Vec& lo, Vec& hi) {
  const int dim = comps.front().dim();
  lo.assign(static_cast<std::size_t>(dim), 1e300);
  hi.assign(static_cast<std::size_t>(dim), -1e300);
  for (const DiagGaussian& g : comps) {
    for (int d = 0; d < dim; ++d) {
      const double sd = std::exp(0.5 * g.log_var[static_cast<std::size_t>(d)]);
      lo[static_cast<std::size_t>(d)] = std::min(lo[static_cast<std::size_t>(d)], g.mean[static_cast<std::size_t>(d)] - sigmas * sd);
      hi[static_cast<std::size_t>(d)] = std::max(hi[static_cast<std::size_t>(d)], g.mean[static_cast<std::size_t>(d)] + sigmas * sd);
    }
  }
}

}  // namespace detail

inline double r_avg(const std::vector<DiagGaussian>& posteriors) {
  if (posteriors.empty()) throw ConfigError("no posteriors given");
  double acc = 0.0;
  for (const DiagGaussian& q : posteriors) acc += kl_to_standard_normal(q);
  return acc / static_cast<double>(posteriors.size());
}

inline std::vector<DiagGaussian> collect_posteriors(const Model& model, const Dataset& data) {
  if (data.empty()) throw ConfigError("empty dataset");
  std::vector<DiagGaussian> out;
  out.reserve(data.size());
  for (const Utterance& u : data) out.push_back(model.posterior_for(u));
  return out;
}

// Exact-mixture quadrature of the mutual information and the marginal KL,
// with a Richardson half-resolution error estimate. The aggregated density is
// the exact uniform mixture of the given posteriors.
inline CapacityReport mi_quadrature(const std::vector<DiagGaussian>& posteriors,
                                    const QuadratureOptions& opts = {}) {
  if (posteriors.empty()) throw ConfigError("no posteriors given");
  if (posteriors.size() > 4096) throw ConfigError("quadrature limited to 4096 posteriors");
  const int dim = posteriors.front().dim();
  if (dim > 2) throw ConfigError("quadrature limited to latent dimension <= 2");
  if (opts.points_per_axis < 8) throw ConfigError("grid too coarse");

  const int n = static_cast<int>(posteriors.size());
  std::vector<Vec> inv_var(posteriors.size());
  std::vector<double> log_norm(posteriors.size(), 0.0);
  for (std::size_t c = 0; c < posteriors.size(); ++c) {
    inv_var[c].resize(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) {
      inv_var[c][static_cast<std::size_t>(d)] = std::exp(-posteriors[c].log_var[static_cast<std::size_t>(d)]);
      log_norm[c] += -0.5 * (kLog2Pi + posteriors[c].log_var[static_cast<std::size_t>(d)]);
    }
  }
  auto log_density = [&](int c, const double* z) {
    const DiagGaussian& g = posteriors[static_cast<std::size_t>(c)];
    double acc = log_norm[static_cast<std::size_t>(c)];
    for (int d = 0; d < dim; ++d) {
      const double diff = z[d] - g.mean[static_cast<std::size_t>(d)];
      acc -= 0.5 * diff * diff * inv_var[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)];
    }
    return acc;
  };

  CapacityReport rep;
  rep.method = MiMethod::quadrature;
  rep.r_avg = r_avg(posteriors);
  detail::component_bounds(posteriors, 6.0, rep.grid.lo, rep.grid.hi);
  rep.grid.points_per_axis = opts.points_per_axis;
  Vec inner_lo, inner_hi;
  detail::component_bounds(posteriors, 5.0, inner_lo, inner_hi);

  const detail::QuadAccum full = detail::quad_sweep(
      n, dim, rep.grid.lo, rep.grid.hi, inner_lo, inner_hi, opts.points_per_axis, log_density);
  const detail::QuadAccum half = detail::quad_sweep(
      n, dim, rep.grid.lo, rep.grid.hi, inner_lo, inner_hi, opts.points_per_axis / 2, log_density);
  rep.i_q = full.i_q;
  rep.aggregate_kl = full.agg;
  rep.error_bound = std::fabs(full.i_q - half.i_q) + std::fabs(full.agg - half.agg) +
                    std::fabs(full.i_q - full.i_q_inner) + std::fabs(full.agg - full.agg_inner);
  rep.reliable = rep.error_bound <= opts.tolerance;
  return rep;
}

// Sampled estimator of the mutual information against the exact finite
// mixture: for z ~ q(.|x_n), score log q(z|x_n) - log q(z). The marginal KL
// is reported as the difference r_avg - i_q.
inline CapacityReport mi_monte_carlo(const std::vector<DiagGaussian>& posteriors,
                                     int samples_per_x, std::uint64_t seed) {
  if (posteriors.empty()) throw ConfigError("no posteriors given");
  if (samples_per_x < 1) throw ConfigError("need at least one sample per example");
  const int n = static_cast<int>(posteriors.size());
  const int dim = posteriors.front().dim();

  Rng rng(mix_seed(seed, 0x6d63ULL));
  std::vector<double> logq(posteriors.size(), 0.0);
  double sum = 0.0, sq = 0.0;
  const double log_n = std::log(static_cast<double>(n));
  for (int c = 0; c < n; ++c) {
    for (int s = 0; s < samples_per_x; ++s) {
      const Vec z = sample_reparam(posteriors[static_cast<std::size_t>(c)], rng.normal_vec(dim));
      double max_lq = -1e300;
      for (int m = 0; m < n; ++m) {
        logq[static_cast<std::size_t>(m)] = log_prob(posteriors[static_cast<std::size_t>(m)], z);
        max_lq = std::max(max_lq, logq[static_cast<std::size_t>(m)]);
      }
      double mix = 0.0;
      for (int m = 0; m < n; ++m)
        if (logq[static_cast<std::size_t>(m)] > max_lq - kLogSumExpSkip) mix += std::exp(logq[static_cast<std::size_t>(m)] - max_lq);
      const double log_mix = max_lq + std::log(mix) - log_n;
      const double val = logq[static_cast<std::size_t>(c)] - log_mix;
      sum += val;
      sq += val * val;
    }
  }
  const double total = static_cast<double>(n) * samples_per_x;
  CapacityReport rep;
  rep.method = MiMethod::monte_carlo;
  rep.r_avg = r_avg(posteriors);
  rep.i_q = sum / total;
  rep.mc_std_err = std::sqrt(std::max(0.0, sq / total - rep.i_q * rep.i_q) / total);
  rep.aggregate_kl = rep.r_avg - rep.i_q;
  return rep;
}

//============================================================================
// Bound verification
//============================================================================

struct BoundCheck {
  bool pass = true;
  std::vector<std::pair<std::string, bool>> checks;  // (name, held) in order
  std::vector<std::string> failures;
  CapacityReport report;

  void require(bool ok, const std::string& name, const std::string& detail) {
    checks.emplace_back(name, ok);
    if (!ok) {
      pass = false;
      failures.push_back(name + " violated: " + detail);
    }
  }
};

// Checks the information bound i_q <= r_avg and the decomposition identity
// r_avg = i_q + aggregate_kl on an already-computed report.
inline BoundCheck check_flat_report(const CapacityReport& rep) {
  BoundCheck chk;
  chk.report = rep;
  const double tol = std::max(1e-6, rep.method == MiMethod::quadrature
                                        ? rep.error_bound
                                        : 3.0 * rep.mc_std_err);
  chk.require(rep.i_q <= rep.r_avg + tol, "i_q <= r_avg",
              "i_q=" + format_double(rep.i_q) + " r_avg=" + format_double(rep.r_avg));
  chk.require(rep.aggregate_kl >= -tol, "aggregate_kl >= 0",
              "aggregate_kl=" + format_double(rep.aggregate_kl));
  const double residual = std::fabs(rep.r_avg - rep.i_q - rep.aggregate_kl);
  chk.require(residual <= tol, "r_avg = i_q + aggregate_kl",
              "residual=" + format_double(residual) + " tol=" + format_double(tol));
  return chk;
}

inline BoundCheck verify_flat_bounds(const Model& model, const Dataset& data,
                                     const QuadratureOptions& opts = {}) {
  return check_flat_report(mi_quadrature(collect_posteriors(model, data), opts));
}

//============================================================================
// Hierarchical bound suite
//============================================================================

struct HierBoundOptions {
  int grid_points = 128;      // per axis, for both latent levels' quadratures
  int marginal_samples = 256; // z_L draws per x when marginalizing q(z_H | x)
  int rate_samples = 256;     // draws per x for the rate estimates
  int joint_mc_samples = 64;  // draws per x for the joint-latent estimator
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
};

struct HierQuantities {
  double r_avg_h = 0.0, r_avg_h_se = 0.0;
  double r_avg_l = 0.0, r_avg_l_se = 0.0;  // joint rate minus upper rate, per draw
  double i_q_zl = 0.0, i_q_zl_bound = 0.0;
  double i_q_zh = 0.0, i_q_zh_bound = 0.0;
  double i_q_joint = 0.0, i_q_joint_se = 0.0;
};

struct HierBoundCheck {
  bool pass = true;
  std::vector<std::pair<std::string, bool>> checks;  // (name, held) in order
  std::vector<std::string> failures;
  HierQuantities q;

  void require(bool ok, const std::string& name, const std::string& detail) {
    checks.emplace_back(name, ok);
    if (!ok) {
      pass = false;
      failures.push_back(name + " violated: " + detail);
    }
  }
};

// Estimates every quantity in the two-level bound chain and asserts:
//   i_q(X; Z_H)        <= r_avg_H
//   i_q(X; Z_L)        <= r_avg_H + r_avg_L
//   i_q(X; [Z_H, Z_L])  = i_q(X; Z_L)
//   i_q(X; Z_H)        <= i_q(X; Z_L)
inline HierBoundCheck verify_hier_bounds(const Model& model, const Dataset& data,
                                         const HierBoundOptions& opts = {}) {
  if (!model.config().hierarchical) throw ConfigError("model is not hierarchical");
  if (data.empty()) throw ConfigError("empty dataset");
  const int dim = model.config().latent_dim;
  if (dim > 2) throw ConfigError("bound suite limited to latent dimension <= 2");
  const int n = static_cast<int>(data.size());

  const std::vector<DiagGaussian> q_l = collect_posteriors(model, data);

  HierBoundCheck chk;
  HierQuantities& q = chk.q;

  // Lower-level mutual information by exact-mixture quadrature.
  QuadratureOptions lower_opts;
  lower_opts.points_per_axis = opts.grid_points;
  lower_opts.tolerance = opts.tolerance;
  const CapacityReport lower = mi_quadrature(q_l, lower_opts);
  q.i_q_zl = lower.i_q;
  q.i_q_zl_bound = lower.error_bound;

  // Rates, by sampling the inference chain. The upper rate uses the closed
  // form given each sampled z_L; the lower rate is the joint log ratio minus
  // the upper contribution, i.e. log q_L(z_L) - log p(z_L | z_H).
  Rng rng(mix_seed(opts.seed, 0x68696572ULL));
  {
    double sum_h = 0.0, sq_h = 0.0, sum_l = 0.0, sq_l = 0.0;
    for (int c = 0; c < n; ++c) {
      for (int s = 0; s < opts.rate_samples; ++s) {
        const Vec z_l = sample_reparam(q_l[static_cast<std::size_t>(c)], rng.normal_vec(dim));
        const DiagGaussian q_h = model.hier_q_h(z_l);
        const Vec z_h = sample_reparam(q_h, rng.normal_vec(dim));
        const DiagGaussian p_l = model.hier_p_l(z_h);
        const double rh = kl_to_standard_normal(q_h);
        const double rl = log_prob(q_l[static_cast<std::size_t>(c)], z_l) - log_prob(p_l, z_l);
        sum_h += rh;
        sq_h += rh * rh;
        sum_l += rl;
        sq_l += rl * rl;
      }
    }
    const double total = static_cast<double>(n) * opts.rate_samples;
    q.r_avg_h = sum_h / total;
    q.r_avg_h_se = std::sqrt(std::max(0.0, sq_h / total - q.r_avg_h * q.r_avg_h) / total);
    q.r_avg_l = sum_l / total;
    q.r_avg_l_se = std::sqrt(std::max(0.0, sq_l / total - q.r_avg_l * q.r_avg_l) / total);
  }

  // Upper-level mutual information: marginalize q(z_H | x) over z_L draws,
  // then run the same exact-mixture quadrature over the per-example marginal
  // mixtures.
  {
    const int s_count = opts.marginal_samples;
    std::vector<std::vector<DiagGaussian>> marg(static_cast<std::size_t>(n));
    std::vector<DiagGaussian> all;
    all.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(s_count));
    for (int c = 0; c < n; ++c) {
      marg[static_cast<std::size_t>(c)].reserve(static_cast<std::size_t>(s_count));
      for (int s = 0; s < s_count; ++s) {
        const Vec z_l = sample_reparam(q_l[static_cast<std::size_t>(c)], rng.normal_vec(dim));
        marg[static_cast<std::size_t>(c)].push_back(model.hier_q_h(z_l));
        all.push_back(marg[static_cast<std::size_t>(c)].back());
      }
    }
    Vec lo, hi, inner_lo, inner_hi;
    detail::component_bounds(all, 6.0, lo, hi);
    detail::component_bounds(all, 5.0, inner_lo, inner_hi);
    const double log_s = std::log(static_cast<double>(s_count));
    std::vector<double> buf(static_cast<std::size_t>(s_count), 0.0);
    auto log_marginal = [&](int c, const double* z) {
      const auto& comps = marg[static_cast<std::size_t>(c)];
      double max_l = -1e300;
      for (int s = 0; s < s_count; ++s) {
        double acc = 0.0;
        const DiagGaussian& g = comps[static_cast<std::size_t>(s)];
        for (int d = 0; d < dim; ++d) {
          const double lv = g.log_var[static_cast<std::size_t>(d)];
          const double diff = z[d] - g.mean[static_cast<std::size_t>(d)];
          acc += -0.5 * (kLog2Pi + lv + diff * diff * std::exp(-lv));
        }
        buf[static_cast<std::size_t>(s)] = acc;
        max_l = std::max(max_l, acc);
      }
      double mix = 0.0;
      for (int s = 0; s < s_count; ++s)
        if (buf[static_cast<std::size_t>(s)] > max_l - kLogSumExpSkip) mix += std::exp(buf[static_cast<std::size_t>(s)] - max_l);
      return max_l + std::log(mix) - log_s;
    };
    const detail::QuadAccum full =
        detail::quad_sweep(n, dim, lo, hi, inner_lo, inner_hi, opts.grid_points, log_marginal);
    const detail::QuadAccum half =
        detail::quad_sweep(n, dim, lo, hi, inner_lo, inner_hi, opts.grid_points / 2, log_marginal);
    q.i_q_zh = full.i_q;
    q.i_q_zh_bound = std::fabs(full.i_q - half.i_q) + std::fabs(full.i_q - full.i_q_inner);
  }

  // Joint-latent mutual information by sampling: the aggregated joint density
  // shares the q(z_H | z_L) factor with the numerator, so the estimator is
  // computed with both factors in place and cross-checks the z_L-only value.
  {
    std::vector<double> lq(static_cast<std::size_t>(n), 0.0);
    double sum = 0.0, sq = 0.0;
    const double log_n = std::log(static_cast<double>(n));
    for (int c = 0; c < n; ++c) {
      for (int s = 0; s < opts.joint_mc_samples; ++s) {
        const Vec z_l = sample_reparam(q_l[static_cast<std::size_t>(c)], rng.normal_vec(dim));
        const DiagGaussian q_h = model.hier_q_h(z_l);
        const Vec z_h = sample_reparam(q_h, rng.normal_vec(dim));
        const double log_qh = log_prob(q_h, z_h);
        double max_l = -1e300;
        for (int m = 0; m < n; ++m) {
          lq[static_cast<std::size_t>(m)] = log_prob(q_l[static_cast<std::size_t>(m)], z_l) + log_qh;
          max_l = std::max(max_l, lq[static_cast<std::size_t>(m)]);
        }
        double mix = 0.0;
        for (int m = 0; m < n; ++m)
          if (lq[static_cast<std::size_t>(m)] > max_l - kLogSumExpSkip) mix += std::exp(lq[static_cast<std::size_t>(m)] - max_l);
        const double log_joint_mix = max_l + std::log(mix) - log_n;
        const double val = (log_prob(q_l[static_cast<std::size_t>(c)], z_l) + log_qh) - log_joint_mix;
        sum += val;
        sq += val * val;
      }
    }
    const double total = static_cast<double>(n) * opts.joint_mc_samples;
    q.i_q_joint = sum / total;
    q.i_q_joint_se = std::sqrt(std::max(0.0, sq / total - q.i_q_joint * q.i_q_joint) / total);
  }

  const double base_tol = 1e-6;
  chk.require(q.i_q_zh <= q.r_avg_h + 3.0 * q.r_avg_h_se + q.i_q_zh_bound + base_tol,
              "i_q(X;Z_H) <= r_avg_H",
              format_double(q.i_q_zh) + " vs " + format_double(q.r_avg_h));
  chk.require(q.i_q_zl <= q.r_avg_h + q.r_avg_l +
                              3.0 * (q.r_avg_h_se + q.r_avg_l_se) + q.i_q_zl_bound + base_tol,
              "i_q(X;Z_L) <= r_avg_H + r_avg_L",
              format_double(q.i_q_zl) + " vs " + format_double(q.r_avg_h + q.r_avg_l));
  chk.require(std::fabs(q.i_q_joint - q.i_q_zl) <=
                  3.0 * q.i_q_joint_se + q.i_q_zl_bound + base_tol,
              "i_q(X;[Z_H,Z_L]) = i_q(X;Z_L)",
              format_double(q.i_q_joint) + " vs " + format_double(q.i_q_zl));
  chk.require(q.i_q_zh <= q.i_q_zl + 3.0 * q.i_q_joint_se + q.i_q_zh_bound +
                              q.i_q_zl_bound + base_tol,
              "i_q(X;Z_H) <= i_q(X;Z_L)",
              format_double(q.i_q_zh) + " vs " + format_double(q.i_q_zl));
  return chk;
}

//============================================================================
// Report serialization (flat key=value text)
//============================================================================

inline void write_capacity_report(std::ostream& os, const CapacityReport& rep) {
  os << "r_avg=" << format_double(rep.r_avg) << "\n";
  os << "i_q=" << format_double(rep.i_q) << "\n";
  os << "aggregate_kl=" << format_double(rep.aggregate_kl) << "\n";
  os << "method=" << (rep.method == MiMethod::quadrature ? "quadrature" : "monte_carlo") << "\n";
  if (rep.method == MiMethod::monte_carlo) {
    os << "mc_std_err=" << format_double(rep.mc_std_err) << "\n";
  } else {
    os << "grid_points=" << rep.grid.points_per_axis << "\n";
    for (std::size_t d = 0; d < rep.grid.lo.size(); ++d) {
      os << "grid_lo_" << d << "=" << format_double(rep.grid.lo[d]) << "\n";
      os << "grid_hi_" << d << "=" << format_double(rep.grid.hi[d]) << "\n";
    }
    os << "error_bound=" << format_double(rep.error_bound) << "\n";
    os << "reliable=" << (rep.reliable ? 1 : 0) << "\n";
  }
}

}  // namespace captoy
