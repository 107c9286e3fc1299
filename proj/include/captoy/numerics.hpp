#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"
#include "captoy/rng.hpp"

namespace captoy {

//============================================================================
// Parameter storage
//============================================================================

// One named tensor with its gradient accumulator and Adam moment buffers.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // first moment (Adam)
  Matrix v;  // second moment (Adam)
  long step = 0;
};

// Owns all trainable tensors of a model. Iteration order is creation order,
// which keeps parameter traversal (updates, checkpoints, gradient checks)
// deterministic.
class ParamStore {
 public:
  Param& add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Matrix(rows, cols);
    p->grad = Matrix(rows, cols);
    p->m = Matrix(rows, cols);
    p->v = Matrix(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }

  Matrix& value(const std::string& name) { return at(name).value; }
  const Matrix& value(const std::string& name) const { return at(name).value; }
  Matrix& grad(const std::string& name) { return at(name).grad; }

  std::size_t count() const { return params_.size(); }
  Param& param(std::size_t i) { return *params_[i]; }
  const Param& param(std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p->grad.fill(0.0);
  }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& p : params_)
      for (double g : p->grad.data()) sq += g * g;
    return std::sqrt(sq);
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t> index_;
};

//============================================================================
// Elementwise primitives with hand-derived backward passes
//============================================================================

inline Vec tanh_vec(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

// d_in += d_out * (1 - y^2), y being the forward output.
inline void tanh_backward(const Vec& y, const Vec& d_out, Vec& d_in) {
  for (std::size_t i = 0; i < y.size(); ++i) d_in[i] += d_out[i] * (1.0 - y[i] * y[i]);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Overflow-safe log(1 + e^x); exact identity x + log1p(e^-x) above the cutoff.
inline double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// d/dx softplus(x) = sigmoid(x)
inline double softplus_grad(double x) { return sigmoid(x); }

// Numerically stable binary cross-entropy from a logit:
// bce(s, t) = softplus(s) - t * s  for target t in {0, 1}.
inline double bce_with_logit(double s, double target) {
  double sp;
  if (s > 0.0)
    sp = s + std::log1p(std::exp(-s));
  else
    sp = std::log1p(std::exp(s));
  return sp - target * s;
}

inline double bce_with_logit_grad(double s, double target) { return sigmoid(s) - target; }

// y = W x + b
inline Vec affine(const Matrix& w, const Vec& b, const Vec& x) {
  Vec y = matvec(w, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

// Accumulates dL/dW += d_out x^T, dL/db += d_out, dL/dx += W^T d_out.
inline void affine_backward(const Matrix& w, const Vec& x, const Vec& d_out, Matrix& d_w,
                            Vec& d_b, Vec* d_x) {
  add_outer(d_w, d_out, x);
  for (std::size_t i = 0; i < d_out.size(); ++i) d_b[i] += d_out[i];
  if (d_x != nullptr) {
    const Vec back = matvec_transposed(w, d_out);
    for (std::size_t i = 0; i < back.size(); ++i) (*d_x)[i] += back[i];
  }
}

//============================================================================
// Optimizers
//============================================================================

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update over every parameter in the store, with bias correction.
// Gradients are consumed (zeroed) by the call. Throws TrainingError on
// non-finite gradients, naming the offending tensor.
inline void adam_step(ParamStore& store, const AdamConfig& cfg) {
  for (std::size_t i = 0; i < store.count(); ++i) {
    Param& p = store.param(i);
    for (double g : p.grad.data())
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
    p.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    Vec& val = p.value.data();
    Vec& grad = p.grad.data();
    Vec& m = p.m.data();
    Vec& v = p.v.data();
    for (std::size_t k = 0; k < val.size(); ++k) {
      const double g = grad[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      val[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    p.grad.fill(0.0);
  }
}

// Plain SGD with heavy-ball momentum for scalar state (used by the dual
// variable updates). Returns the new (value, velocity) pair.
inline std::pair<double, double> sgd_momentum_step(double value, double grad, double velocity,
                                                   double lr, double momentum) {
  const double vel = momentum * velocity + grad;
  return {value - lr * vel, vel};
}

// Rescales all gradients in-place so their global L2 norm does not exceed
// max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = store.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (std::size_t i = 0; i < store.count(); ++i)
      for (double& g : store.param(i).grad.data()) g *= scale;
  }
  return norm;
}

//============================================================================
// Gradient verification
//============================================================================

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  bool all_finite = true;
};

// Compares analytic gradients (already accumulated in the store) against
// central finite differences of the scalar function f, which must evaluate the
// same loss from the current parameter values without touching gradients.
// Relative error per entry: |a - n| / max(1e-8, |a| + |n|).
inline GradCheckResult finite_diff_check(ParamStore& store,
                                         const std::function<double(ParamStore&)>& f,
                                         double step_scale = 1e-5) {
  GradCheckResult res;
  for (std::size_t i = 0; i < store.count(); ++i) {
    Param& p = store.param(i);
    Vec& val = p.value.data();
    const Vec& grad = p.grad.data();
    for (std::size_t k = 0; k < val.size(); ++k) {
      const double orig = val[k];
      const double h = step_scale * std::max(1.0, std::fabs(orig));
      val[k] = orig + h;
      const double f_plus = f(store);
      val[k] = orig - h;
      const double f_minus = f(store);
      val[k] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        res.all_finite = false;
        res.worst_param = p.name;
        res.worst_index = static_cast<int>(k);
        res.max_rel_err = std::numeric_limits<double>::infinity();
        return res;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double analytic = grad[k];
      const double rel =
          std::fabs(analytic - numeric) / std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = static_cast<int>(k);
      }
    }
  }
  return res;
}

//============================================================================
// Parameter initialization
//============================================================================

// Fills a tensor with N(0, scale^2) draws in row-major order.
inline void init_normal(Matrix& w, Rng& rng, double scale) {
  for (double& x : w.data()) x = scale * rng.normal();
}

}  // namespace captoy
