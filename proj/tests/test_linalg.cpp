#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wmla/errors.hpp"
#include "wmla/linalg.hpp"

using namespace wmla;
using namespace wmla::linalg;
using wmla::testutil::random_matrix;

namespace {

Matrix reconstruct(const SvdFactors& f) {
  Matrix us = f.u;
  for (int64_t i = 0; i < us.rows(); ++i)
    for (int64_t j = 0; j < us.cols(); ++j) us.at(i, j) *= f.s[static_cast<size_t>(j)];
  return matmul_nt(us, f.v);
}

double orthonormality_defect(const Matrix& m) {
  Matrix g = matmul_tn(m, m);
  double worst = 0.0;
  for (int64_t i = 0; i < g.rows(); ++i)
    for (int64_t j = 0; j < g.cols(); ++j)
      worst = std::max(worst, std::fabs(g.at(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

}  // namespace

TEST_CASE("matmul kernels match a scalar triple loop") {
  Matrix a = random_matrix(11, 7, 5);
  Matrix b = random_matrix(12, 5, 9);
  Matrix c = matmul(a, b);
  for (int64_t i = 0; i < 7; ++i)
    for (int64_t j = 0; j < 9; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK(max_abs_diff(matmul_nt(a, transpose(b)), c) < 1e-12);
  CHECK(max_abs_diff(matmul_tn(transpose(a), b), c) < 1e-12);
}

TEST_CASE("OpenMP kernels are bitwise identical to the serial reference") {
  Matrix a = random_matrix(21, 33, 48);
  Matrix b = random_matrix(22, 48, 29);
  CHECK(max_abs_diff(matmul(a, b), serial::matmul(a, b)) == 0.0);
  Matrix bt = random_matrix(23, 29, 48);
  CHECK(max_abs_diff(matmul_nt(a, bt), serial::matmul_nt(a, bt)) == 0.0);
  Matrix at = random_matrix(24, 48, 33);
  CHECK(max_abs_diff(matmul_tn(at, b), serial::matmul_tn(at, b)) == 0.0);
  Matrix s = random_matrix(25, 40, 40, 3.0);
  CHECK(max_abs_diff(softmax_rows(s), serial::softmax_rows(s)) == 0.0);
  CHECK(max_abs_diff(causal_softmax_rows(s, 0), serial::causal_softmax_rows(s, 0)) == 0.0);
}

TEST_CASE("softmax_rows basics") {
  Matrix m(1, 2);
  Matrix out = softmax_rows(m);
  CHECK(out.at(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(out.at(0, 1) == doctest::Approx(0.5).epsilon(1e-14));

  Matrix v(1, 3);
  v.at(0, 0) = std::log(1.0);
  v.at(0, 1) = std::log(2.0);
  v.at(0, 2) = std::log(3.0);
  Matrix p = softmax_rows(v);
  CHECK(std::fabs(p.at(0, 0) - 1.0 / 6.0) < 1e-12);
  CHECK(std::fabs(p.at(0, 1) - 2.0 / 6.0) < 1e-12);
  CHECK(std::fabs(p.at(0, 2) - 3.0 / 6.0) < 1e-12);
}

TEST_CASE("softmax_rows shift invariance and row sums") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Matrix m = random_matrix(seed, 5, 13, 4.0);
    Matrix shifted = m;
    Rng rng(seed + 1000);
    for (int64_t i = 0; i < m.rows(); ++i) {
      const double c = 10.0 * rng.normal();
      for (int64_t j = 0; j < m.cols(); ++j) shifted.at(i, j) += c;
    }
    Matrix p = softmax_rows(m);
    CHECK(max_abs_diff(p, softmax_rows(shifted)) < 1e-12);
    for (int64_t i = 0; i < p.rows(); ++i) {
      double sum = 0.0;
      for (int64_t j = 0; j < p.cols(); ++j) {
        CHECK(p.at(i, j) >= 0.0);
        sum += p.at(i, j);
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_rows rejects non-finite input") {
  Matrix m(1, 2);
  m.at(0, 0) = std::nan("");
  CHECK_THROWS_AS(softmax_rows(m), ArgumentError);
}

TEST_CASE("truncated_svd on the identity") {
  SvdFactors f = truncated_svd(Matrix::identity(3), 3);
  for (double s : f.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(max_abs_diff(reconstruct(f), Matrix::identity(3)) < 1e-12);
}

TEST_CASE("truncated_svd drops exactly the smallest singular value of a diagonal") {
  Matrix d(3, 3);
  d.at(0, 0) = 3.0;
  d.at(1, 1) = 2.0;
  d.at(2, 2) = 1.0;
  SvdFactors f = truncated_svd(d, 2);
  REQUIRE(f.s.size() == 2);
  CHECK(f.s[0] == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(f.s[1] == doctest::Approx(2.0).epsilon(1e-13));
  Matrix diff = reconstruct(f);
  linalg::axpy_inplace(diff, d, -1.0);
  CHECK(frobenius_norm(diff) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("truncated_svd singular values match the Gram-matrix oracle") {
  Matrix a = random_matrix(77, 6, 9);
  SvdFactors f = truncated_svd(a, 4);
  const std::vector<double> ref = oracles::singular_values(a);
  for (size_t i = 0; i < 4; ++i) CHECK(std::fabs(f.s[i] - ref[i]) < 1e-8);
}

TEST_CASE("SVD factor properties on seeded matrices up to 64x96") {
  const struct {
    int64_t r, c;
    uint64_t seed;
  } cases[] = {{5, 4, 1}, {16, 16, 2}, {24, 40, 3}, {64, 96, 4}, {96, 64, 5}};
  for (const auto& tc : cases) {
    Matrix a = random_matrix(tc.seed, tc.r, tc.c);
    const int64_t full = std::min(tc.r, tc.c);
    SvdFactors f = truncated_svd(a, full);
    CHECK(orthonormality_defect(f.u) < 1e-10);
    CHECK(orthonormality_defect(f.v) < 1e-10);
    for (size_t i = 0; i + 1 < f.s.size(); ++i) CHECK(f.s[i] >= f.s[i + 1]);
    for (double s : f.s) CHECK(s >= 0.0);
    // full-rank exactness
    Matrix diff = reconstruct(f);
    linalg::axpy_inplace(diff, a, -1.0);
    CHECK(frobenius_norm(diff) / frobenius_norm(a) < 1e-9);
  }
}

TEST_CASE("truncation error is monotone in rank and matches Eckart-Young") {
  Matrix a = random_matrix(31, 12, 9);
  double prev = 1e300;
  for (int64_t k = 1; k <= 9; ++k) {
    SvdFactors f = truncated_svd(a, k);
    Matrix diff = reconstruct(f);
    linalg::axpy_inplace(diff, a, -1.0);
    const double err = frobenius_norm(diff);
    CHECK(err <= prev + 1e-12);
    CHECK(std::fabs(err - oracles::truncation_error(a, k)) < 1e-8);
    prev = err;
  }
  // spot checks at scale
  Matrix b = random_matrix(32, 64, 96);
  double prev_b = 1e300;
  for (int64_t k : {8, 16, 32, 64}) {
    SvdFactors f = truncated_svd(b, k);
    Matrix diff = reconstruct(f);
    linalg::axpy_inplace(diff, b, -1.0);
    const double err = frobenius_norm(diff);
    CHECK(err <= prev_b + 1e-12);
    CHECK(std::fabs(err - oracles::truncation_error(b, k)) < 1e-8);
    prev_b = err;
  }
}

TEST_CASE("truncated_svd is deterministic and sign-fixed") {
  Matrix a = random_matrix(55, 10, 7);
  SvdFactors f1 = truncated_svd(a, 7);
  SvdFactors f2 = truncated_svd(a, 7);
  CHECK(max_abs_diff(f1.u, f2.u) == 0.0);
  CHECK(max_abs_diff(f1.v, f2.v) == 0.0);
  for (int64_t j = 0; j < f1.u.cols(); ++j) {
    double best = 0.0;
    for (int64_t i = 0; i < f1.u.rows(); ++i)
      if (std::fabs(f1.u.at(i, j)) > std::fabs(best)) best = f1.u.at(i, j);
    CHECK(best > 0.0);
  }
}

TEST_CASE("truncated_svd handles rank-deficient input") {
  // A = [0 | I]: the zero block contributes zero singular directions
  Matrix a(4, 7);
  for (int64_t i = 0; i < 4; ++i) a.at(i, 3 + i) = 1.0;
  SvdFactors f = truncated_svd(a, 4);
  for (double s : f.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(max_abs_diff(reconstruct(f), a) < 1e-12);
  // requesting more than the true rank still yields orthonormal factors
  Matrix z(5, 3);
  z.at(0, 0) = 2.0;
  SvdFactors g = truncated_svd(z, 3);
  CHECK(g.s[0] == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(g.s[1] == doctest::Approx(0.0).epsilon(1e-13));
  CHECK(orthonormality_defect(g.u) < 1e-10);
}

TEST_CASE("truncated_svd argument errors") {
  Matrix a = random_matrix(9, 4, 6);
  CHECK_THROWS_AS(truncated_svd(a, 0), ArgumentError);
  CHECK_THROWS_AS(truncated_svd(a, 5), ArgumentError);
  Matrix bad(2, 2);
  bad.at(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(truncated_svd(bad, 1), ArgumentError);
}

TEST_CASE("causal softmax masks strictly future positions") {
  Matrix s = random_matrix(41, 4, 6, 2.0);
  Matrix p = causal_softmax_rows(s, 2);  // 6 keys, 4 queries, offset 2
  for (int64_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < 6; ++j) {
      if (j > 2 + i) CHECK(p.at(i, j) == 0.0);
      sum += p.at(i, j);
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}
