#pragma once

// Independent reference implementations used to compute expected test values.
// Everything here is deliberately written with plain scalar loops and, for the
// SVD, a different algorithm (two-sided Jacobi on the Gram matrix) than the
// library path it checks.

#include <vector>

#include "wmla/attention.hpp"
#include "wmla/matrix.hpp"
#include "wmla/model.hpp"

namespace wmla::oracles {

// All min(rows, cols) singular values, descending, via eigenvalues of A^T A.
std::vector<double> singular_values(const Matrix& a);

// Eckart-Young: sqrt of the sum of squared singular values beyond `rank`.
double truncation_error(const Matrix& a, int64_t rank);

// Scalar-loop multi-head attention, no caching.
Matrix brute_mha(const Matrix& x_q, const Matrix& x_kv, const MhaLayerWeights& w,
                 const AttentionConfig& cfg, bool causal);
// Same, reconstructing full keys/values from the latent by explicit loops.
Matrix brute_mla(const Matrix& x_q, const Matrix& x_kv, const MlaLayerWeights& w,
                 const AttentionConfig& cfg, bool causal);

// Per-site q/k projections recorded while running the naive forward.
struct NaiveRecord {
  std::vector<Matrix> enc_q, enc_k;
  std::vector<Matrix> dec_self_q, dec_self_k;
  std::vector<Matrix> cross_q, cross_k;
};

Matrix naive_encode(const Model& m, const std::vector<int>& source, NaiveRecord* rec = nullptr);
Matrix naive_forward_logits(const Model& m, const std::vector<int>& source,
                            const std::vector<int>& dec_in, NaiveRecord* rec = nullptr);

}  // namespace wmla::oracles
