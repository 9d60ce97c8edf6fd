#pragma once

#include <cstdint>
#include <vector>

#include "wmla/matrix.hpp"

namespace wmla {

struct Model;
struct Example;
enum class Site : int;

// Which key frequency subspaces each head keeps out of the low-rank
// compression. Subspace k covers head dimensions 2k and 2k+1.
struct SubspaceSelection {
  int64_t n_heads = 0;
  int64_t d_head = 0;                              // even
  std::vector<std::vector<int64_t>> per_head;      // sorted, distinct, length r each

  int64_t r_per_head() const { return per_head.empty() ? 0 : static_cast<int64_t>(per_head[0].size()); }
  int64_t n_preserved() const { return 2 * r_per_head() * n_heads; }
  void validate() const;  // throws ConfigError on malformed selections

  // Local dimension indices per head: subspace k -> {2k, 2k+1}, sorted.
  std::vector<std::vector<int64_t>> expand_to_dims() const;
  // Global preserved column indices (head h, local j -> h*d_head + j), ascending.
  std::vector<int64_t> global_preserved_dims() const;
  // Ascending complement of the preserved set in [0, n_heads*d_head).
  std::vector<int64_t> global_compressed_dims() const;
};

// Same subspace list for every head, from the geometric spacing formula
// { floor(k*d_head/(2r)) : 0 <= k < r }.
std::vector<int64_t> select_uniform(int64_t d_head, int64_t r);
SubspaceSelection uniform_selection(int64_t n_heads, int64_t d_head, int64_t r);
// r = 0: nothing preserved, every key dimension is compressed.
SubspaceSelection full_compression_selection(int64_t n_heads, int64_t d_head);

// Mean per-position product of query/key subspace 2-norms, one score per
// (head, subspace), accumulated over a calibration pass.
struct NormStatistics {
  int64_t n_heads = 0;
  int64_t n_subspaces = 0;  // d_head / 2
  int64_t sample_count = 0;
  Matrix scores;            // n_heads x n_subspaces, all >= 0
};

// Top-r subspaces per head by score; ties broken by the lower index.
SubspaceSelection select_2norm(const NormStatistics& stats, int64_t r);

// Runs forward passes with the original MHA weights over the calibration
// batch and accumulates per-layer statistics for one attention site.
// Self-attention sites pair each position's q with its own k; cross-attention
// has no positional pairing, so the score is the product of the q-side and
// k-side mean norms (equivalently the mean product over all position pairs).
std::vector<NormStatistics> collect_norm_statistics(const Model& model,
                                                    const std::vector<Example>& calibration,
                                                    Site site);

}  // namespace wmla
