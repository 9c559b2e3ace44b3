#include "l2p/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "l2p/errors.hpp"
#include "l2p/parallel.hpp"

namespace l2p {

double CsrMatrix::entry(int r, int c) const {
  const auto begin = col_idx.begin() + row_ptr[r];
  const auto end = col_idx.begin() + row_ptr[r + 1];
  const auto it = std::lower_bound(begin, end, c);
  if (it == end || *it != c) return 0.0;
  return vals[static_cast<std::size_t>(it - col_idx.begin())];
}

CsrMatrix CsrMatrix::from_triplets(
    int rows, int cols, std::vector<std::pair<std::pair<int, int>, double>> trips) {
  std::map<std::pair<int, int>, double> acc;
  for (const auto& [rc, v] : trips) {
    if (rc.first < 0 || rc.first >= rows || rc.second < 0 || rc.second >= cols) {
      throw ShapeError("CsrMatrix::from_triplets: index out of range");
    }
    acc[rc] += v;
  }
  CsrMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.row_ptr.assign(static_cast<std::size_t>(rows) + 1, 0);
  for (const auto& [rc, v] : acc) m.row_ptr[static_cast<std::size_t>(rc.first) + 1]++;
  for (int r = 0; r < rows; ++r) m.row_ptr[r + 1] += m.row_ptr[r];
  m.col_idx.reserve(acc.size());
  m.vals.reserve(acc.size());
  for (const auto& [rc, v] : acc) {  // map iterates row-major sorted
    m.col_idx.push_back(rc.second);
    m.vals.push_back(v);
  }
  return m;
}

CsrMatrix CsrMatrix::from_dense(const Tensor& t, double tol) {
  std::vector<std::pair<std::pair<int, int>, double>> trips;
  for (int r = 0; r < t.rows(); ++r) {
    for (int c = 0; c < t.cols(); ++c) {
      if (std::abs(t.at(r, c)) > tol) trips.push_back({{r, c}, t.at(r, c)});
    }
  }
  return from_triplets(t.rows(), t.cols(), std::move(trips));
}

Tensor CsrMatrix::to_dense() const {
  Tensor out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int i = row_ptr[r]; i < row_ptr[r + 1]; ++i) out.at(r, col_idx[i]) += vals[i];
  }
  return out;
}

Tensor spmm(const CsrMatrix& a, const Tensor& h) {
  if (a.cols != h.rows()) {
    throw ShapeError("spmm: sparse cols " + std::to_string(a.cols) + " vs dense rows " +
                     std::to_string(h.rows()));
  }
  Tensor out(a.rows, h.cols());
  acc_spmm(out, a, h);
  return out;
}

void acc_spmm(Tensor& acc, const CsrMatrix& a, const Tensor& h) {
  if (a.cols != h.rows() || acc.rows() != a.rows || acc.cols() != h.cols()) {
    throw ShapeError("acc_spmm: " + acc.shape_str() + " += sparse " + std::to_string(a.rows) +
                     "x" + std::to_string(a.cols) + " * " + h.shape_str());
  }
  const int d = h.cols();
  parallel_rows(a.rows, [&](int lo, int hi) {
    for (int r = lo; r < hi; ++r) {
      double* out_row = acc.data() + static_cast<std::size_t>(r) * d;
      for (int i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
        const double v = a.vals[i];
        const double* in_row = h.data() + static_cast<std::size_t>(a.col_idx[i]) * d;
        for (int c = 0; c < d; ++c) out_row[c] += v * in_row[c];
      }
    }
  });
}

void acc_spmm_transposed(Tensor& acc, const CsrMatrix& a, const Tensor& h) {
  if (a.rows != h.rows() || acc.rows() != a.cols || acc.cols() != h.cols()) {
    throw ShapeError("acc_spmm_transposed: " + acc.shape_str() + " += sparse^T " +
                     std::to_string(a.cols) + "x" + std::to_string(a.rows) + " * " +
                     h.shape_str());
  }
  const int d = h.cols();
  for (int r = 0; r < a.rows; ++r) {
    const double* in_row = h.data() + static_cast<std::size_t>(r) * d;
    for (int i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
      const double v = a.vals[i];
      double* out_row = acc.data() + static_cast<std::size_t>(a.col_idx[i]) * d;
      for (int c = 0; c < d; ++c) out_row[c] += v * in_row[c];
    }
  }
}

Tensor spmm_scaled(const CsrMatrix& a, const std::vector<double>& scale, const Tensor& w) {
  if (a.cols != w.rows()) {
    throw ShapeError("spmm_scaled: sparse cols " + std::to_string(a.cols) + " vs dense rows " +
                     std::to_string(w.rows()));
  }
  if (!scale.empty() && static_cast<int>(scale.size()) != a.nnz()) {
    throw ShapeError("spmm_scaled: scale length " + std::to_string(scale.size()) +
                     " vs nnz " + std::to_string(a.nnz()));
  }
  const int d = w.cols();
  Tensor out(a.rows, d);
  const bool scaled = !scale.empty();
  parallel_rows(a.rows, [&](int lo, int hi) {
    for (int r = lo; r < hi; ++r) {
      double* out_row = out.data() + static_cast<std::size_t>(r) * d;
      for (int i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
        const double v = scaled ? a.vals[i] * scale[i] : a.vals[i];
        if (v == 0.0) continue;
        const double* in_row = w.data() + static_cast<std::size_t>(a.col_idx[i]) * d;
        for (int c = 0; c < d; ++c) out_row[c] += v * in_row[c];
      }
    }
  });
  return out;
}

void acc_spmm_scaled_transposed(Tensor& acc, const CsrMatrix& a,
                                const std::vector<double>& scale, const Tensor& g) {
  if (a.rows != g.rows() || acc.rows() != a.cols || acc.cols() != g.cols()) {
    throw ShapeError("acc_spmm_scaled_transposed: " + acc.shape_str() + " += sparse^T " +
                     std::to_string(a.cols) + "x" + std::to_string(a.rows) + " * " +
                     g.shape_str());
  }
  if (!scale.empty() && static_cast<int>(scale.size()) != a.nnz()) {
    throw ShapeError("acc_spmm_scaled_transposed: scale length " +
                     std::to_string(scale.size()) + " vs nnz " + std::to_string(a.nnz()));
  }
  const int d = g.cols();
  const bool scaled = !scale.empty();
  for (int r = 0; r < a.rows; ++r) {
    const double* g_row = g.data() + static_cast<std::size_t>(r) * d;
    for (int i = a.row_ptr[r]; i < a.row_ptr[r + 1]; ++i) {
      const double v = scaled ? a.vals[i] * scale[i] : a.vals[i];
      if (v == 0.0) continue;
      double* out_row = acc.data() + static_cast<std::size_t>(a.col_idx[i]) * d;
      for (int c = 0; c < d; ++c) out_row[c] += v * g_row[c];
    }
  }
}

}  // namespace l2p
