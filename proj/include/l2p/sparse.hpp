#pragma once

#include <utility>
#include <vector>

#include "l2p/tensor.hpp"

namespace l2p {

/// Compressed sparse row matrix of 64-bit reals.
struct CsrMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<int> row_ptr;   // size rows + 1
  std::vector<int> col_idx;   // size nnz, sorted within each row
  std::vector<double> vals;   // size nnz
  bool symmetric = false;     // builder-guaranteed structural + value symmetry

  int nnz() const { return static_cast<int>(col_idx.size()); }

  /// Entry lookup by binary search; 0 for absent entries. Test convenience.
  double entry(int r, int c) const;

  /// Build from (row, col, value) triplets. Duplicates are summed.
  static CsrMatrix from_triplets(int rows, int cols,
                                 std::vector<std::pair<std::pair<int, int>, double>> trips);
  static CsrMatrix from_dense(const Tensor& t, double tol = 0.0);
  Tensor to_dense() const;
};

/// out = a * h. Row-parallel over the output.
Tensor spmm(const CsrMatrix& a, const Tensor& h);
/// acc += a * h.
void acc_spmm(Tensor& acc, const CsrMatrix& a, const Tensor& h);
/// acc += a^T * h. Scatter over output rows; serial.
void acc_spmm_transposed(Tensor& acc, const CsrMatrix& a, const Tensor& h);

/// out = a * w with an optional per-nonzero scale (dropout mask over stored
/// entries). scale may be empty (treated as all-ones).
Tensor spmm_scaled(const CsrMatrix& a, const std::vector<double>& scale, const Tensor& w);
/// acc += (a with per-nnz scale)^T * g.
void acc_spmm_scaled_transposed(Tensor& acc, const CsrMatrix& a,
                                const std::vector<double>& scale, const Tensor& g);

}  // namespace l2p
