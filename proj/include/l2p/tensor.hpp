#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "l2p/errors.hpp"
#include "l2p/rng.hpp"

namespace l2p {

/// Dense row-major matrix of 64-bit reals. The only tensor rank the engine
/// supports; vectors are N x 1 or 1 x N.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, double fill = 0.0);
  Tensor(int rows, int cols, std::vector<double> values);

  static Tensor from(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.rows_, t.cols_); }
  static Tensor identity(int n);
  static Tensor randn(int rows, int cols, Rng& rng, double scale = 1.0);
  /// Glorot-uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
  static Tensor glorot(int rows, int cols, Rng& rng);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double& at(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }
  double scalar() const;

  bool all_finite() const;
  double max_abs() const;
  void fill(double v);

  std::string shape_str() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> v_;
};

// Dense kernels (Eigen-backed). "nn"/"nt"/"tn" name which operands are
// transposed. acc_* accumulate into an already-shaped output.
Tensor matmul_nn(const Tensor& a, const Tensor& b);
void acc_matmul_nn(Tensor& acc, const Tensor& a, const Tensor& b);
void acc_matmul_nt(Tensor& acc, const Tensor& a, const Tensor& b);
void acc_matmul_tn(Tensor& acc, const Tensor& a, const Tensor& b);

}  // namespace l2p
