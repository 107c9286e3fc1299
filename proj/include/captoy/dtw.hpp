#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "captoy/common.hpp"
#include "captoy/matrix.hpp"

namespace captoy {

struct DtwResult {
  double total_cost = 0.0;
  std::vector<std::pair<int, int>> path;  // (a index, b index), start to end
  double per_frame_cost = 0.0;
};

struct DtwOptions {
  double warp_penalty = 1.0;
  double cost_scale = 1.0;           // multiplies the local frame distance
  bool per_frame_by_max_len = false; // divide by max(T1, T2) instead of path length
};

inline double frame_distance(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double diff = a[d] - b[d];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

// Dynamic time warping over steps {(1,0), (0,1), (1,1)}. The warp penalty is
// added on the two non-diagonal steps. Ties prefer the diagonal, then the
// a-advance, then the b-advance.
inline DtwResult dtw(const Matrix& a, const Matrix& b, const DtwOptions& opts = {}) {
  if (a.rows() < 1 || b.rows() < 1) throw ConfigError("dtw needs non-empty sequences");
  if (a.cols() != b.cols()) throw ConfigError("dtw frame dimensions differ");
  const int t1 = a.rows();
  const int t2 = b.rows();
  const int dim = a.cols();
  const double pen = opts.warp_penalty;

  Matrix d(t1, t2);
  // 0 = origin, 1 = diagonal, 2 = a-advance (from i-1,j), 3 = b-advance (from i,j-1)
  std::vector<std::uint8_t> choice(static_cast<std::size_t>(t1) * static_cast<std::size_t>(t2), 0);
  auto cost = [&](int i, int j) {
    return opts.cost_scale * frame_distance(a.row_ptr(i), b.row_ptr(j), dim);
  };

  d(0, 0) = cost(0, 0);
  for (int i = 1; i < t1; ++i) {
    d(i, 0) = d(i - 1, 0) + pen + cost(i, 0);
    choice[static_cast<std::size_t>(i) * static_cast<std::size_t>(t2)] = 2;
  }
  for (int j = 1; j < t2; ++j) {
    d(0, j) = d(0, j - 1) + pen + cost(0, j);
    choice[static_cast<std::size_t>(j)] = 3;
  }
  for (int i = 1; i < t1; ++i) {
    for (int j = 1; j < t2; ++j) {
      const double diag = d(i - 1, j - 1);
      const double from_a = d(i - 1, j) + pen;
      const double from_b = d(i, j - 1) + pen;
      double best;
      std::uint8_t who;
      if (diag <= from_a && diag <= from_b) {
        best = diag;
        who = 1;
      } else if (from_a <= from_b) {
        best = from_a;
        who = 2;
      } else {
        best = from_b;
        who = 3;
      }
      d(i, j) = best + cost(i, j);
      choice[static_cast<std::size_t>(i) * static_cast<std::size_t>(t2) + static_cast<std::size_t>(j)] = who;
    }
  }

  DtwResult out;
  out.total_cost = d(t1 - 1, t2 - 1);
  int i = t1 - 1, j = t2 - 1;
  while (true) {
    out.path.emplace_back(i, j);
    const std::uint8_t who = choice[static_cast<std::size_t>(i) * static_cast<std::size_t>(t2) + static_cast<std::size_t>(j)];
    if (who == 0) break;
    if (who == 1) {
      --i;
      --j;
    } else if (who == 2) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(out.path.begin(), out.path.end());
  const double denom = opts.per_frame_by_max_len ? static_cast<double>(std::max(t1, t2))
                                                 : static_cast<double>(out.path.size());
  out.per_frame_cost = out.total_cost / denom;
  return out;
}

inline DtwResult dtw(const Matrix& a, const Matrix& b, double warp_penalty) {
  DtwOptions opts;
  opts.warp_penalty = warp_penalty;
  return dtw(a, b, opts);
}

}  // namespace captoy
