#include "l2p/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

namespace l2p {

namespace {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenRowMajor>;
using MutMap = Eigen::Map<EigenRowMajor>;

ConstMap map_of(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap map_of(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }

}  // namespace

Tensor::Tensor(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {
  if (rows < 0 || cols < 0) throw ShapeError("Tensor: negative dimension");
}

Tensor::Tensor(int rows, int cols, std::vector<double> values)
    : rows_(rows), cols_(cols), v_(std::move(values)) {
  if (v_.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("Tensor: value count " + std::to_string(v_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
  Tensor t(r, c);
  int i = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw ShapeError("Tensor::from: ragged rows");
    int j = 0;
    for (double v : row) t.at(i, j++) = v;
    ++i;
  }
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t(n, n);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::randn(int rows, int cols, Rng& rng, double scale) {
  Tensor t(rows, cols);
  for (auto& v : t.v_) v = scale * rng.normal();
  return t;
}

Tensor Tensor::glorot(int rows, int cols, Rng& rng) {
  const double a = std::sqrt(6.0 / (rows + cols));
  Tensor t(rows, cols);
  for (auto& v : t.v_) v = rng.uniform(-a, a);
  return t;
}

double Tensor::scalar() const {
  if (!is_scalar()) throw ShapeError("scalar() on " + shape_str());
  return v_[0];
}

bool Tensor::all_finite() const {
  for (double v : v_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : v_) m = std::max(m, std::abs(v));
  return m;
}

void Tensor::fill(double v) {
  for (auto& e : v_) e = v;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Tensor matmul_nn(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
  }
  Tensor out(a.rows(), b.cols());
  map_of(out).noalias() = map_of(a) * map_of(b);
  return out;
}

void acc_matmul_nn(Tensor& acc, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows() || acc.rows() != a.rows() || acc.cols() != b.cols()) {
    throw ShapeError("acc_matmul_nn: " + acc.shape_str() + " += " + a.shape_str() + " * " +
                     b.shape_str());
  }
  map_of(acc).noalias() += map_of(a) * map_of(b);
}

void acc_matmul_nt(Tensor& acc, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols() || acc.rows() != a.rows() || acc.cols() != b.rows()) {
    throw ShapeError("acc_matmul_nt: " + acc.shape_str() + " += " + a.shape_str() + " * " +
                     b.shape_str() + "^T");
  }
  map_of(acc).noalias() += map_of(a) * map_of(b).transpose();
}

void acc_matmul_tn(Tensor& acc, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || acc.rows() != a.cols() || acc.cols() != b.cols()) {
    throw ShapeError("acc_matmul_tn: " + acc.shape_str() + " += " + a.shape_str() + "^T * " +
                     b.shape_str());
  }
  map_of(acc).noalias() += map_of(a).transpose() * map_of(b);
}

}  // namespace l2p
