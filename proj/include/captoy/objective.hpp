#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/gaussian.hpp"
#include "captoy/model.hpp"
#include "captoy/numerics.hpp"
#include "captoy/rng.hpp"
#include "captoy/toy_data.hpp"

namespace captoy {

//============================================================================
// Constrained-objective machinery
//============================================================================

// One Lagrange multiplier, kept non-negative by the softplus parameterization
// and driven by gradient ascent on the constraint violation.
struct LagrangeState {
  double lambda_raw = 0.54132485461292392;  // softplus(lambda_raw) = 1
  double momentum_buffer = 0.0;
  double lr = 1e-5;
  double momentum = 0.9;

  double beta() const { return softplus(lambda_raw); }

  // Ascent step on beta * (R - C) with R treated as a constant.
  void ascend(double r_minus_c) {
    const double grad = sigmoid(lambda_raw) * r_minus_c;
    const auto [value, vel] =
        sgd_momentum_step(lambda_raw, -grad, momentum_buffer, lr, momentum);
    lambda_raw = value;
    momentum_buffer = vel;
  }
};

struct CapacityTarget {
  bool hierarchical = false;
  double c = 0.0;    // flat limit, nats
  double c_h = 0.0;  // upper-level limit, nats
  double c_l = 0.0;  // excess lower-level limit, nats

  static CapacityTarget flat(double c) {
    if (c < 0.0) throw ConfigError("capacity must be non-negative");
    CapacityTarget t;
    t.c = c;
    return t;
  }
  static CapacityTarget hier(double c_h, double c_l) {
    if (c_h < 0.0 || c_l < 0.0) throw ConfigError("capacities must be non-negative");
    CapacityTarget t;
    t.hierarchical = true;
    t.c_h = c_h;
    t.c_l = c_l;
    return t;
  }
};

// loss = recon_nll + beta * (R - C); beta is a constant for the model update.
inline double lagrangian(double recon_nll, double r, double beta, double c) {
  return recon_nll + beta * (r - c);
}

// d loss / d lambda_raw with R held constant (the dual side of the min-max).
inline double dual_grad(double lambda_raw, double r, double c) {
  return sigmoid(lambda_raw) * (r - c);
}

inline double hier_lagrangian(double recon_nll, double r_h, double r_l, double beta_h,
                              double beta_l, double c_h, double c_l) {
  return recon_nll + beta_h * (r_h - c_h) + beta_l * (r_l - c_l);
}

//============================================================================
// Forward-only ELBO terms
//============================================================================

inline FlatTerms elbo_terms(const Model& m, const Utterance& u, const Vec& eps) {
  const DiagGaussian q = m.posterior_for(u);
  const Vec z = sample_reparam(q, eps);
  const auto [pred, recon] = m.decode_teacher_forced(z, u.y_t, u.y_s, u.frames);
  FlatTerms t;
  t.recon_nll = recon;
  t.r = kl_to_standard_normal(q);
  t.frames = u.length();
  return t;
}

inline HierTerms hier_elbo_terms(const Model& m, const Utterance& u, const Vec& eps_l,
                                 const Vec& eps_h) {
  const HierLatents lat = m.hierarchical_posterior(
      m.encode_reference(u.frames), m.condition_summary(u.y_t, u.y_s), eps_l, eps_h);
  const auto [pred, recon] = m.decode_teacher_forced(lat.z_l, u.y_t, u.y_s, u.frames);
  HierTerms t;
  t.recon_nll = recon;
  t.r_h = kl_to_standard_normal(lat.q_h);
  t.r_l = kl_divergence(lat.q_l, lat.p_l_given_h);
  t.frames = u.length();
  return t;
}

//============================================================================
// Training loop
//============================================================================

struct TrainOptions {
  long steps = 20000;
  int batch_size = 8;
  double lr_base = 1e-3;
  bool lr_decay = true;    // piecewise: x1, x0.5, x0.3, x0.1, x0.05 of lr_base
  double dual_lr = 1e-5;   // per-step multiplier learning rate before scaling
  double dual_lr_scale = 50.0;
  double dual_momentum = 0.9;
  double grad_clip = 5.0;  // 0 disables clipping
  bool fixed_beta = false;  // freeze multipliers at the values below
  double fixed_beta_value = 1.0;
  double fixed_beta_h = 1.0;
  double fixed_beta_l = 1.0;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Stepwise decay mirroring a 5-stage schedule over the run: boundaries at
// 1/6, 1/3, 1/2 and 2/3 of the total step count.
inline double scheduled_lr(const TrainOptions& opts, long step) {
  if (!opts.lr_decay) return opts.lr_base;
  const double frac = static_cast<double>(step) / static_cast<double>(opts.steps);
  if (frac < 1.0 / 6.0) return opts.lr_base;
  if (frac < 1.0 / 3.0) return opts.lr_base * 0.5;
  if (frac < 0.5) return opts.lr_base * 0.3;
  if (frac < 2.0 / 3.0) return opts.lr_base * 0.1;
  return opts.lr_base * 0.05;
}

struct StepMetrics {
  long step = 0;
  double recon_nll = 0.0;  // batch mean, summed over frames within an example
  double r = 0.0;          // flat rate, or r_h + r_l in hierarchical mode
  double r_h = 0.0;
  double r_l = 0.0;
  double beta = 0.0;
  double beta_h = 0.0;
  double beta_l = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<StepMetrics> metrics;
  long completed_steps = 0;
  bool aborted = false;  // NaN encountered; model retains the last good step
  double final_beta = 0.0;
  double final_beta_h = 0.0;
  double final_beta_l = 0.0;
};

namespace detail {

inline std::vector<Matrix> snapshot_values(const ParamStore& store) {
  std::vector<Matrix> out;
  out.reserve(store.count());
  for (std::size_t i = 0; i < store.count(); ++i) out.push_back(store.param(i).value);
  return out;
}

inline void restore_values(ParamStore& store, const std::vector<Matrix>& snap) {
  for (std::size_t i = 0; i < store.count(); ++i) store.param(i).value = snap[i];
}

}  // namespace detail

// Minimizes recon + beta (R - C) over model parameters (Adam) while maximizing
// it over the softplus-parameterized multipliers (SGD with momentum), both
// updated once per batch from the same batch statistics. In heuristic mode the
// loss is plain reconstruction and the multiplier machinery is idle.
inline TrainResult train(Model& model, const Dataset& data, const CapacityTarget& target,
                         const TrainOptions& opts) {
  if (data.empty()) throw ConfigError("training dataset is empty");
  if (opts.steps < 1) throw ConfigError("need at least one training step");
  if (opts.batch_size < 1) throw ConfigError("batch size must be >= 1");
  const bool variational = model.config().bottleneck == Bottleneck::variational;
  const bool hierarchical = model.config().hierarchical;
  if (hierarchical && !target.hierarchical)
    throw ConfigError("hierarchical model needs a hierarchical capacity target");
  if (!hierarchical && variational && target.hierarchical)
    throw ConfigError("flat model needs a flat capacity target");

  Rng rng(mix_seed(opts.seed, 0x747261696eULL));
  LagrangeState lam, lam_h, lam_l;
  lam.lr = lam_h.lr = lam_l.lr = opts.dual_lr * opts.dual_lr_scale;
  lam.momentum = lam_h.momentum = lam_l.momentum = opts.dual_momentum;

  AdamConfig adam;
  adam.beta1 = opts.adam_beta1;
  adam.beta2 = opts.adam_beta2;
  adam.eps = opts.adam_eps;

  TrainResult result;
  result.metrics.reserve(static_cast<std::size_t>(opts.steps));
  const int z_dim = model.config().latent_dim;
  std::vector<Matrix> last_good = detail::snapshot_values(model.params());

  for (long step = 0; step < opts.steps; ++step) {
    adam.lr = scheduled_lr(opts, step);
    const double scale = 1.0 / static_cast<double>(opts.batch_size);

    StepMetrics m;
    m.step = step;
    m.lr = adam.lr;

    const double beta = opts.fixed_beta ? opts.fixed_beta_value : lam.beta();
    const double beta_h = opts.fixed_beta ? opts.fixed_beta_h : lam_h.beta();
    const double beta_l = opts.fixed_beta ? opts.fixed_beta_l : lam_l.beta();
    if (beta < 0.0 || beta_h < 0.0 || beta_l < 0.0)
      throw TrainingError("negative multiplier");          // softplus makes this unreachable

    for (int b = 0; b < opts.batch_size; ++b) {
      const Utterance& u = data[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data.size())))];
      if (!variational) {
        const FlatTerms t = model.recon_backward(u, scale);
        m.recon_nll += t.recon_nll * scale;
      } else if (hierarchical) {
        const Vec eps_l = rng.normal_vec(z_dim);
        const Vec eps_h = rng.normal_vec(z_dim);
        const HierTerms t = model.hier_elbo_backward(u, eps_l, eps_h, beta_h, beta_l, scale);
        m.recon_nll += t.recon_nll * scale;
        m.r_h += t.r_h * scale;
        m.r_l += t.r_l * scale;
      } else {
        const Vec eps = rng.normal_vec(z_dim);
        const FlatTerms t = model.elbo_backward(u, eps, beta, scale);
        m.recon_nll += t.recon_nll * scale;
        m.r += t.r * scale;
      }
    }
    if (hierarchical) m.r = m.r_h + m.r_l;
    m.beta = beta;
    m.beta_h = beta_h;
    m.beta_l = beta_l;

    const bool finite = std::isfinite(m.recon_nll) && std::isfinite(m.r);
    bool stepped = false;
    if (finite) {
      try {
        if (opts.grad_clip > 0.0) clip_grad_norm(model.params(), opts.grad_clip);
        adam_step(model.params(), adam);
        stepped = true;
      } catch (const TrainingError&) {
        stepped = false;
      }
    }
    if (!finite || !stepped) {
      detail::restore_values(model.params(), last_good);
      model.params().zero_grads();
      result.aborted = true;
      break;
    }

    if (variational && !opts.fixed_beta) {
      if (hierarchical) {
        lam_h.ascend(m.r_h - target.c_h);
        lam_l.ascend(m.r_l - target.c_l);
      } else {
        lam.ascend(m.r - target.c);
      }
    }

    result.metrics.push_back(m);
    result.completed_steps = step + 1;
    last_good = detail::snapshot_values(model.params());
  }

  result.final_beta = opts.fixed_beta ? opts.fixed_beta_value : lam.beta();
  result.final_beta_h = opts.fixed_beta ? opts.fixed_beta_h : lam_h.beta();
  result.final_beta_l = opts.fixed_beta ? opts.fixed_beta_l : lam_l.beta();
  return result;
}

//============================================================================
// Metrics CSV
//============================================================================

inline constexpr const char* kMetricsHeader =
    "step,recon_nll,R,R_H,R_L,beta,beta_H,beta_L,lr";

// One row per step. Columns that do not apply to the run mode stay empty:
// flat runs leave R_H/R_L/beta_H/beta_L blank, hierarchical runs leave beta
// blank, non-variational runs leave all rate and multiplier columns blank.
inline void write_metrics_csv(std::ostream& os, const std::vector<StepMetrics>& rows,
                              bool variational, bool hierarchical) {
  os << kMetricsHeader << "\n";
  for (const StepMetrics& m : rows) {
    os << m.step << ',' << format_double(m.recon_nll) << ',';
    if (variational) os << format_double(m.r);
    os << ',';
    if (variational && hierarchical) os << format_double(m.r_h);
    os << ',';
    if (variational && hierarchical) os << format_double(m.r_l);
    os << ',';
    if (variational && !hierarchical) os << format_double(m.beta);
    os << ',';
    if (variational && hierarchical) os << format_double(m.beta_h);
    os << ',';
    if (variational && hierarchical) os << format_double(m.beta_l);
    os << ',' << format_double(m.lr) << "\n";
  }
}

// Mean of the trailing `window` values of a metric column; used for
// constraint-satisfaction checks at the end of training.
inline double trailing_mean(const std::vector<StepMetrics>& rows, double StepMetrics::*field,
                            std::size_t window) {
  if (rows.empty()) throw ConfigError("no metrics recorded");
  const std::size_t n = std::min(window, rows.size());
  double acc = 0.0;
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) acc += rows[i].*field;
  return acc / static_cast<double>(n);
}

//============================================================================
// Held-out evaluation
//============================================================================

// Teacher-forced reconstruction loss with the latent fixed at the posterior
// mean (hierarchical models decode the lower latent's mean). Returns the mean
// over utterances of the frame-summed loss.
inline double evaluate_recon(const Model& model, const Dataset& data) {
  if (data.empty()) throw ConfigError("evaluation dataset is empty");
  double acc = 0.0;
  for (const Utterance& u : data) {
    Vec z;
    if (model.config().bottleneck == Bottleneck::tanh_heuristic) {
      z = model.heuristic_bottleneck(model.encode_reference(u.frames));
    } else {
      z = model.posterior_for(u).mean;
    }
    const auto [pred, loss] = model.decode_teacher_forced(z, u.y_t, u.y_s, u.frames);
    acc += loss;
  }
  return acc / static_cast<double>(data.size());
}

// Dataset-mean closed-form rate of the (lower) posterior against N(0, I).
inline double evaluate_r_avg(const Model& model, const Dataset& data) {
  if (data.empty()) throw ConfigError("evaluation dataset is empty");
  double acc = 0.0;
  for (const Utterance& u : data) acc += kl_to_standard_normal(model.posterior_for(u));
  return acc / static_cast<double>(data.size());
}

}  // namespace captoy
