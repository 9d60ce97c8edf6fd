#include "wmla/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "wmla/errors.hpp"

namespace wmla::linalg {

namespace {

void check_matmul(const Matrix&, const Matrix&, int64_t ak, int64_t bk, const char* who) {
  if (ak != bk) {
    std::ostringstream os;
    os << who << ": inner dimension mismatch (" << ak << " vs " << bk << ")";
    throw ArgumentError(os.str());
  }
}

// c[i,:] += a_ik * b[k,:] over k; the j loop vectorizes, the k accumulation
// order is fixed so serial and parallel results are bitwise identical.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, int64_t i) {
  const int64_t kk = a.cols(), n = b.cols();
  double* crow = c.row(i);
  const double* arow = a.row(i);
  for (int64_t k = 0; k < kk; ++k) {
    const double aik = arow[k];
    if (aik == 0.0) continue;
    const double* brow = b.row(k);
    for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
  }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& c, int64_t i) {
  const int64_t kk = a.cols(), n = b.rows();
  double* crow = c.row(i);
  const double* arow = a.row(i);
  for (int64_t j = 0; j < n; ++j) {
    const double* brow = b.row(j);
    double acc = 0.0;
    for (int64_t k = 0; k < kk; ++k) acc += arow[k] * brow[k];
    crow[j] = acc;
  }
}

inline void softmax_row(const double* in, double* out, int64_t allowed, int64_t n) {
  double mx = in[0];
  for (int64_t j = 1; j < allowed; ++j) mx = std::max(mx, in[j]);
  double sum = 0.0;
  for (int64_t j = 0; j < allowed; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (int64_t j = 0; j < allowed; ++j) out[j] *= inv;
  for (int64_t j = allowed; j < n; ++j) out[j] = 0.0;
}

}  // namespace

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  for (int64_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  for (int64_t i = 0; i < a.rows(); ++i) matmul_nt_row(a, b, c, i);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  // accumulate rank-1 updates in fixed k order
  for (int64_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (int64_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i);
      for (int64_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix softmax_rows(const Matrix& m) {
  if (!all_finite(m)) throw ArgumentError("softmax_rows: non-finite input");
  Matrix out(m.rows(), m.cols());
  for (int64_t i = 0; i < m.rows(); ++i) softmax_row(m.row(i), out.row(i), m.cols(), m.cols());
  return out;
}

Matrix causal_softmax_rows(const Matrix& scores, int64_t query_offset) {
  Matrix out(scores.rows(), scores.cols());
  for (int64_t i = 0; i < scores.rows(); ++i) {
    const int64_t allowed = std::min<int64_t>(scores.cols(), query_offset + i + 1);
    if (allowed < 1) throw ArgumentError("causal_softmax_rows: fully masked row");
    softmax_row(scores.row(i), out.row(i), allowed, scores.cols());
  }
  return out;
}

}  // namespace serial

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  const int64_t m = a.rows();
#pragma omp parallel for schedule(static) if (m * b.cols() * a.cols() > 32768)
  for (int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  const int64_t m = a.rows();
#pragma omp parallel for schedule(static) if (m * b.rows() * a.cols() > 32768)
  for (int64_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, i);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_matmul(a, b, a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  const int64_t rows_out = a.cols();
  // parallel over output rows: each thread scans the full k range for its
  // rows, so the accumulation order per element matches the serial kernel
#pragma omp parallel for schedule(static) if (rows_out * b.cols() * a.rows() > 32768)
  for (int64_t i = 0; i < rows_out; ++i) {
    double* crow = c.row(i);
    for (int64_t k = 0; k < a.rows(); ++k) {
      const double aki = a.at(k, i);
      if (aki == 0.0) continue;
      const double* brow = b.row(k);
      for (int64_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix softmax_rows(const Matrix& m) {
  if (!all_finite(m)) throw ArgumentError("softmax_rows: non-finite input");
  Matrix out(m.rows(), m.cols());
  const int64_t rows = m.rows();
#pragma omp parallel for schedule(static) if (rows * m.cols() > 16384)
  for (int64_t i = 0; i < rows; ++i) softmax_row(m.row(i), out.row(i), m.cols(), m.cols());
  return out;
}

Matrix causal_softmax_rows(const Matrix& scores, int64_t query_offset) {
  Matrix out(scores.rows(), scores.cols());
  const int64_t rows = scores.rows();
  for (int64_t i = 0; i < rows; ++i) {
    const int64_t allowed = std::min<int64_t>(scores.cols(), query_offset + i + 1);
    if (allowed < 1) throw ArgumentError("causal_softmax_rows: fully masked row");
  }
#pragma omp parallel for schedule(static) if (rows * scores.cols() > 16384)
  for (int64_t i = 0; i < rows; ++i) {
    const int64_t allowed = std::min<int64_t>(scores.cols(), query_offset + i + 1);
    softmax_row(scores.row(i), out.row(i), allowed, scores.cols());
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (int64_t i = 0; i < m.rows(); ++i)
    for (int64_t j = 0; j < m.cols(); ++j) t.at(j, i) = m.at(i, j);
  return t;
}

void add_row_inplace(Matrix& m, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    throw ArgumentError("add_row_inplace: shape mismatch");
  const double* r = row.row(0);
  for (int64_t i = 0; i < m.rows(); ++i) {
    double* mi = m.row(i);
    for (int64_t j = 0; j < m.cols(); ++j) mi[j] += r[j];
  }
}

void scale_inplace(Matrix& m, double s) {
  for (double& v : m.data()) v *= s;
}

void axpy_inplace(Matrix& acc, const Matrix& x, double a) {
  if (!acc.same_shape(x)) throw ArgumentError("axpy_inplace: shape mismatch");
  const double* xs = x.data().data();
  double* as = acc.data().data();
  const int64_t n = acc.size();
  for (int64_t i = 0; i < n; ++i) as[i] += a * xs[i];
}

Matrix col_slice(const Matrix& m, int64_t c0, int64_t width) {
  if (c0 < 0 || width < 0 || c0 + width > m.cols()) throw ArgumentError("col_slice: out of range");
  Matrix out(m.rows(), width);
  for (int64_t i = 0; i < m.rows(); ++i)
    std::memcpy(out.row(i), m.row(i) + c0, static_cast<size_t>(width) * sizeof(double));
  return out;
}

Matrix gather_cols(const Matrix& m, const std::vector<int64_t>& idx) {
  Matrix out(m.rows(), static_cast<int64_t>(idx.size()));
  for (int64_t j = 0; j < out.cols(); ++j)
    if (idx[j] < 0 || idx[j] >= m.cols()) throw ArgumentError("gather_cols: index out of range");
  for (int64_t i = 0; i < m.rows(); ++i) {
    const double* src = m.row(i);
    double* dst = out.row(i);
    for (int64_t j = 0; j < out.cols(); ++j) dst[j] = src[idx[j]];
  }
  return out;
}

void scatter_cols_into(Matrix& dst, const Matrix& src, const std::vector<int64_t>& idx) {
  if (src.cols() != static_cast<int64_t>(idx.size()) || src.rows() != dst.rows())
    throw ArgumentError("scatter_cols_into: shape mismatch");
  for (int64_t j = 0; j < src.cols(); ++j)
    if (idx[j] < 0 || idx[j] >= dst.cols()) throw ArgumentError("scatter_cols_into: index out of range");
  for (int64_t i = 0; i < src.rows(); ++i) {
    const double* s = src.row(i);
    double* d = dst.row(i);
    for (int64_t j = 0; j < src.cols(); ++j) d[idx[j]] = s[j];
  }
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data()) acc += v * v;
  return std::sqrt(acc);
}

double max_abs(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data()) acc = std::max(acc, std::fabs(v));
  return acc;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ArgumentError("max_abs_diff: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i)
    acc = std::max(acc, std::fabs(a.data()[i] - b.data()[i]));
  return acc;
}

bool all_finite(const Matrix& m) {
  for (double v : m.data())
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {

// One-sided Jacobi on the columns of w (rows >= cols). Accumulates the right
// rotations into v. Converged when every normalized column dot product falls
// below tol in a full sweep.
void jacobi_orthogonalize(Matrix& w, Matrix& v, int max_sweeps, double tol) {
  const int64_t n = w.cols();
  const int64_t m = w.rows();
  double worst = 0.0;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    worst = 0.0;
    for (int64_t p = 0; p < n - 1; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          const double wp = w.at(i, p), wq = w.at(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        const double denom = std::sqrt(alpha * beta);
        worst = std::max(worst, std::fabs(gamma) / denom);
        if (std::fabs(gamma) <= tol * denom) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int64_t i = 0; i < m; ++i) {
          const double wp = w.at(i, p), wq = w.at(i, q);
          w.at(i, p) = c * wp - s * wq;
          w.at(i, q) = s * wp + c * wq;
        }
        for (int64_t i = 0; i < n; ++i) {
          const double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  std::ostringstream os;
  os << "truncated_svd: Jacobi sweeps did not converge after " << max_sweeps
     << " sweeps (residual " << worst << ")";
  throw NumericalError(os.str());
}

// Deterministic orthonormal completion for an exactly-zero singular direction:
// first canonical basis vector with a large residual against the built columns.
void complete_column(Matrix& u, int64_t col) {
  const int64_t m = u.rows();
  for (int64_t cand = 0; cand < m; ++cand) {
    std::vector<double> e(static_cast<size_t>(m), 0.0);
    e[static_cast<size_t>(cand)] = 1.0;
    for (int64_t j = 0; j < col; ++j) {
      double dot = 0.0;
      for (int64_t i = 0; i < m; ++i) dot += e[static_cast<size_t>(i)] * u.at(i, j);
      for (int64_t i = 0; i < m; ++i) e[static_cast<size_t>(i)] -= dot * u.at(i, j);
    }
    double nrm = 0.0;
    for (double x : e) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm > 0.5) {
      for (int64_t i = 0; i < m; ++i) u.at(i, col) = e[static_cast<size_t>(i)] / nrm;
      return;
    }
  }
  throw NumericalError("truncated_svd: could not complete orthonormal basis");
}

}  // namespace

SvdFactors truncated_svd(const Matrix& m, int64_t rank) {
  const int64_t min_dim = std::min(m.rows(), m.cols());
  if (rank < 1 || rank > min_dim) throw ArgumentError("truncated_svd: rank out of range");
  if (!all_finite(m)) throw ArgumentError("truncated_svd: non-finite input");

  const bool transposed = m.rows() < m.cols();
  Matrix w = transposed ? transpose(m) : m;
  Matrix rot = Matrix::identity(w.cols());
  jacobi_orthogonalize(w, rot, /*max_sweeps=*/100, /*tol=*/1e-15);

  const int64_t n = w.cols();
  std::vector<double> sigma(static_cast<size_t>(n), 0.0);
  for (int64_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < w.rows(); ++i) acc += w.at(i, j) * w.at(i, j);
    sigma[static_cast<size_t>(j)] = std::sqrt(acc);
  }
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return sigma[static_cast<size_t>(a)] > sigma[static_cast<size_t>(b)]; });

  Matrix left(w.rows(), rank);
  Matrix right(n, rank);
  std::vector<double> s(static_cast<size_t>(rank));
  for (int64_t j = 0; j < rank; ++j) {
    const int64_t src = order[static_cast<size_t>(j)];
    const double sv = sigma[static_cast<size_t>(src)];
    s[static_cast<size_t>(j)] = sv;
    if (sv > 0.0) {
      for (int64_t i = 0; i < w.rows(); ++i) left.at(i, j) = w.at(i, src) / sv;
    } else {
      complete_column(left, j);
    }
    for (int64_t i = 0; i < n; ++i) right.at(i, j) = rot.at(i, src);
  }

  SvdFactors f;
  f.s = std::move(s);
  if (transposed) {
    f.u = std::move(right);
    f.v = std::move(left);
  } else {
    f.u = std::move(left);
    f.v = std::move(right);
  }

  // sign convention: largest-magnitude entry of each u column positive
  for (int64_t j = 0; j < rank; ++j) {
    int64_t arg = 0;
    double best = -1.0;
    for (int64_t i = 0; i < f.u.rows(); ++i) {
      const double mag = std::fabs(f.u.at(i, j));
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    if (f.u.at(arg, j) < 0.0) {
      for (int64_t i = 0; i < f.u.rows(); ++i) f.u.at(i, j) = -f.u.at(i, j);
      for (int64_t i = 0; i < f.v.rows(); ++i) f.v.at(i, j) = -f.v.at(i, j);
    }
  }
  return f;
}

}  // namespace wmla::linalg
