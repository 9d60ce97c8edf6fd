#pragma once

#include <cstdint>
#include <vector>

#include "wmla/matrix.hpp"

namespace wmla::linalg {

// Serial reference kernels. These are the ground truth the OpenMP kernels are
// tested against (bitwise: the parallel versions keep the per-element
// summation order) and the baseline for bench/.
namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b);     // A(m,k) * B(k,n)
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A(m,k) * B(n,k)^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // A(k,m)^T * B(k,n)
Matrix softmax_rows(const Matrix& m);
Matrix causal_softmax_rows(const Matrix& scores, int64_t query_offset);
}  // namespace serial

// OpenMP-parallel kernels.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Numerically stable row softmax: each row sums to 1 (max-subtraction).
Matrix softmax_rows(const Matrix& m);

// Row i may only attend to key columns j <= query_offset + i; the rest of the
// row is exactly zero. query_offset = total_keys - n_queries for cached
// decoding, 0 for a plain causal pass.
Matrix causal_softmax_rows(const Matrix& scores, int64_t query_offset);

Matrix transpose(const Matrix& m);
void add_row_inplace(Matrix& m, const Matrix& row);  // broadcast a 1 x n row
void scale_inplace(Matrix& m, double s);
void axpy_inplace(Matrix& acc, const Matrix& x, double a = 1.0);  // acc += a*x

Matrix col_slice(const Matrix& m, int64_t c0, int64_t width);
Matrix gather_cols(const Matrix& m, const std::vector<int64_t>& idx);
// dst columns idx[j] = src column j
void scatter_cols_into(Matrix& dst, const Matrix& src, const std::vector<int64_t>& idx);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m);

// Truncated SVD factors: m ~= u * diag(s) * v^T with orthonormal u, v columns
// and non-increasing non-negative s.
struct SvdFactors {
  Matrix u;               // rows(m) x k
  std::vector<double> s;  // k
  Matrix v;               // cols(m) x k
};

// Deterministic one-sided Jacobi SVD truncated to the top `rank` triplets.
// Sign convention: the largest-magnitude entry of each u column is positive.
// Throws ArgumentError for rank outside [1, min(rows, cols)] or non-finite
// input, NumericalError if the sweep cap is hit before convergence.
SvdFactors truncated_svd(const Matrix& m, int64_t rank);

}  // namespace wmla::linalg
