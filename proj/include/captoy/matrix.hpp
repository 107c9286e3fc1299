#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "captoy/common.hpp"

namespace captoy {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. Small on purpose: the library only needs
// storage, element access and a handful of products.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, 0.0) {
    if (rows < 0 || cols < 0) throw ConfigError("matrix dimensions must be non-negative");
  }
  Matrix(int rows, int cols, Vec data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows) * cols)
      throw ConfigError("matrix data size does not match dimensions");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  double* row_ptr(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
  const double* row_ptr(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

  Vec row(int r) const {
    return Vec(row_ptr(r), row_ptr(r) + cols_);
  }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  void fill(double v) {
    for (double& x : data_) x = v;
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  Vec data_;
};

// y = W x  (W is m x n, x has n entries)
inline Vec matvec(const Matrix& w, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.rows()), 0.0);
  for (int r = 0; r < w.rows(); ++r) {
    const double* wr = w.row_ptr(r);
    double acc = 0.0;
    for (int c = 0; c < w.cols(); ++c) acc += wr[c] * x[static_cast<std::size_t>(c)];
    y[static_cast<std::size_t>(r)] = acc;
  }
  return y;
}

// y = W^T x  (W is m x n, x has m entries, y has n entries)
inline Vec matvec_transposed(const Matrix& w, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.cols()), 0.0);
  for (int r = 0; r < w.rows(); ++r) {
    const double* wr = w.row_ptr(r);
    const double xr = x[static_cast<std::size_t>(r)];
    for (int c = 0; c < w.cols(); ++c) y[static_cast<std::size_t>(c)] += wr[c] * xr;
  }
  return y;
}

// W += a b^T
inline void add_outer(Matrix& w, const Vec& a, const Vec& b) {
  for (int r = 0; r < w.rows(); ++r) {
    double* wr = w.row_ptr(r);
    const double ar = a[static_cast<std::size_t>(r)];
    for (int c = 0; c < w.cols(); ++c) wr[c] += ar * b[static_cast<std::size_t>(c)];
  }
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline Vec concat(const Vec& a, const Vec& b) {
  Vec out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace captoy
