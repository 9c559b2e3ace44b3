#pragma once

#include <cmath>
#include <vector>

#include "l2p/rng.hpp"
#include "l2p/tensor.hpp"

namespace testutil {

inline l2p::Tensor random_tensor(int rows, int cols, l2p::Rng& rng, double scale = 1.0) {
  l2p::Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

/// Reference matmul, deliberately naive (triple loop, no Eigen).
inline l2p::Tensor naive_matmul(const l2p::Tensor& a, const l2p::Tensor& b) {
  l2p::Tensor out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int k = 0; k < a.cols(); ++k)
      for (int j = 0; j < b.cols(); ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
  return out;
}

inline double max_abs_diff(const l2p::Tensor& a, const l2p::Tensor& b) {
  if (!a.same_shape(b)) return 1e300;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline bool exactly_equal(const l2p::Tensor& a, const l2p::Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace testutil
