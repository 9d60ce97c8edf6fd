#include "wmla/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wmla/errors.hpp"
#include "wmla/model.hpp"

namespace wmla {

void SubspaceSelection::validate() const {
  if (n_heads < 1 || d_head < 2 || d_head % 2 != 0)
    throw ConfigError("SubspaceSelection: bad head geometry");
  if (static_cast<int64_t>(per_head.size()) != n_heads)
    throw ConfigError("SubspaceSelection: per_head list count != n_heads");
  const int64_t r = r_per_head();
  for (const auto& subs : per_head) {
    if (static_cast<int64_t>(subs.size()) != r)
      throw ConfigError("SubspaceSelection: ragged per-head lists");
    for (size_t i = 0; i < subs.size(); ++i) {
      if (subs[i] < 0 || subs[i] >= d_head / 2)
        throw ConfigError("SubspaceSelection: subspace index out of range");
      if (i > 0 && subs[i] <= subs[i - 1])
        throw ConfigError("SubspaceSelection: indices must be sorted and distinct");
    }
  }
}

std::vector<std::vector<int64_t>> SubspaceSelection::expand_to_dims() const {
  std::vector<std::vector<int64_t>> dims(per_head.size());
  for (size_t h = 0; h < per_head.size(); ++h) {
    dims[h].reserve(per_head[h].size() * 2);
    for (int64_t k : per_head[h]) {
      dims[h].push_back(2 * k);
      dims[h].push_back(2 * k + 1);
    }
    // subspace lists are sorted, so the pair expansion already is
  }
  return dims;
}

std::vector<int64_t> SubspaceSelection::global_preserved_dims() const {
  std::vector<int64_t> out;
  const auto local = expand_to_dims();
  for (int64_t h = 0; h < n_heads; ++h)
    for (int64_t j : local[static_cast<size_t>(h)]) out.push_back(h * d_head + j);
  return out;  // ascending: head blocks are disjoint and internally sorted
}

std::vector<int64_t> SubspaceSelection::global_compressed_dims() const {
  std::vector<bool> kept(static_cast<size_t>(n_heads * d_head), false);
  for (int64_t g : global_preserved_dims()) kept[static_cast<size_t>(g)] = true;
  std::vector<int64_t> out;
  for (int64_t g = 0; g < n_heads * d_head; ++g)
    if (!kept[static_cast<size_t>(g)]) out.push_back(g);
  return out;
}

std::vector<int64_t> select_uniform(int64_t d_head, int64_t r) {
  if (d_head < 2 || d_head % 2 != 0) throw ArgumentError("select_uniform: d_head must be even");
  if (r < 1 || r > d_head / 2) throw ArgumentError("select_uniform: r out of range [1, d_head/2]");
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(r));
  for (int64_t k = 0; k < r; ++k)
    out.push_back((k * d_head) / (2 * r));  // floor(k * d_head / (2r))
  return out;
}

SubspaceSelection uniform_selection(int64_t n_heads, int64_t d_head, int64_t r) {
  SubspaceSelection sel;
  sel.n_heads = n_heads;
  sel.d_head = d_head;
  sel.per_head.assign(static_cast<size_t>(n_heads), select_uniform(d_head, r));
  sel.validate();
  return sel;
}

SubspaceSelection full_compression_selection(int64_t n_heads, int64_t d_head) {
  SubspaceSelection sel;
  sel.n_heads = n_heads;
  sel.d_head = d_head;
  sel.per_head.assign(static_cast<size_t>(n_heads), {});
  sel.validate();
  return sel;
}

SubspaceSelection select_2norm(const NormStatistics& stats, int64_t r) {
  if (r < 1 || r > stats.n_subspaces) throw ArgumentError("select_2norm: r exceeds subspace count");
  SubspaceSelection sel;
  sel.n_heads = stats.n_heads;
  sel.d_head = stats.n_subspaces * 2;
  sel.per_head.resize(static_cast<size_t>(stats.n_heads));
  for (int64_t h = 0; h < stats.n_heads; ++h) {
    std::vector<int64_t> idx(static_cast<size_t>(stats.n_subspaces));
    std::iota(idx.begin(), idx.end(), 0);
    // top-r by score; equal scores fall back to the lower subspace index
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
      return stats.scores.at(h, a) > stats.scores.at(h, b);
    });
    std::vector<int64_t> top(idx.begin(), idx.begin() + r);
    std::sort(top.begin(), top.end());
    sel.per_head[static_cast<size_t>(h)] = std::move(top);
  }
  sel.validate();
  return sel;
}

namespace {

// Sum of per-subspace 2-norms of each row of q (S x d_model), one row of sums
// per head. Used with counts to build means.
void accumulate_subspace_norms(const Matrix& x, int64_t n_heads, int64_t d_head, Matrix& sums) {
  const int64_t n_sub = d_head / 2;
  for (int64_t p = 0; p < x.rows(); ++p) {
    for (int64_t h = 0; h < n_heads; ++h) {
      for (int64_t k = 0; k < n_sub; ++k) {
        const double a = x.at(p, h * d_head + 2 * k);
        const double b = x.at(p, h * d_head + 2 * k + 1);
        sums.at(h, k) += std::sqrt(a * a + b * b);
      }
    }
  }
}

}  // namespace

std::vector<NormStatistics> collect_norm_statistics(const Model& model,
                                                    const std::vector<Example>& calibration,
                                                    Site site) {
  if (calibration.empty()) throw ArgumentError("collect_norm_statistics: empty calibration set");
  const AttentionConfig& cfg = model.spec.site(site);
  if (cfg.variant != AttentionVariant::mha)
    throw ConfigError("collect_norm_statistics: statistics require original MHA weights");
  const int64_t n_layers =
      site == Site::encoder_self ? model.spec.n_encoder_layers : model.spec.n_decoder_layers;
  const int64_t d_head = cfg.d_head();
  const int64_t n_sub = d_head / 2;

  std::vector<NormStatistics> stats(static_cast<size_t>(n_layers));
  for (auto& st : stats) {
    st.n_heads = cfg.n_heads;
    st.n_subspaces = n_sub;
    st.scores = Matrix(cfg.n_heads, n_sub);
  }
  // cross-attention has no positional q/k pairing: accumulate each side's
  // norms separately and score with the product of means
  std::vector<Matrix> q_sums, k_sums;
  if (site == Site::cross) {
    q_sums.assign(static_cast<size_t>(n_layers), Matrix(cfg.n_heads, n_sub));
    k_sums.assign(static_cast<size_t>(n_layers), Matrix(cfg.n_heads, n_sub));
  }
  int64_t q_positions = 0, k_positions = 0;

  for (const Example& e : calibration) {
    ForwardTape tape;
    forward_logits(model, e.source, decoder_input(e), &tape);
    for (int64_t l = 0; l < n_layers; ++l) {
      const AttnTape* at = nullptr;
      if (site == Site::encoder_self) at = &tape.enc[static_cast<size_t>(l)].attn.attn;
      if (site == Site::decoder_self) at = &tape.dec[static_cast<size_t>(l)].self.attn;
      if (site == Site::cross) at = &tape.dec[static_cast<size_t>(l)].cross.attn;
      if (site == Site::cross) {
        accumulate_subspace_norms(at->q, cfg.n_heads, d_head, q_sums[static_cast<size_t>(l)]);
        accumulate_subspace_norms(at->k, cfg.n_heads, d_head, k_sums[static_cast<size_t>(l)]);
      } else {
        // same-position pairing: mean over positions of ||q_p|| * ||k_p||
        for (int64_t p = 0; p < at->q.rows(); ++p) {
          for (int64_t h = 0; h < cfg.n_heads; ++h) {
            for (int64_t k = 0; k < n_sub; ++k) {
              const double q0 = at->q.at(p, h * d_head + 2 * k);
              const double q1 = at->q.at(p, h * d_head + 2 * k + 1);
              const double k0 = at->k.at(p, h * d_head + 2 * k);
              const double k1 = at->k.at(p, h * d_head + 2 * k + 1);
              stats[static_cast<size_t>(l)].scores.at(h, k) +=
                  std::sqrt(q0 * q0 + q1 * q1) * std::sqrt(k0 * k0 + k1 * k1);
            }
          }
        }
      }
    }
    const int64_t s_q = static_cast<int64_t>(decoder_input(e).size());
    const int64_t s_k = static_cast<int64_t>(e.source.size());
    if (site == Site::encoder_self) q_positions += s_k;
    if (site == Site::decoder_self) q_positions += s_q;
    if (site == Site::cross) {
      q_positions += s_q;
      k_positions += s_k;
    }
  }

  for (int64_t l = 0; l < n_layers; ++l) {
    NormStatistics& st = stats[static_cast<size_t>(l)];
    if (site == Site::cross) {
      st.sample_count = q_positions * k_positions;
      for (int64_t h = 0; h < cfg.n_heads; ++h)
        for (int64_t k = 0; k < n_sub; ++k)
          st.scores.at(h, k) = (q_sums[static_cast<size_t>(l)].at(h, k) / static_cast<double>(q_positions)) *
                               (k_sums[static_cast<size_t>(l)].at(h, k) / static_cast<double>(k_positions));
    } else {
      st.sample_count = q_positions;
      linalg::scale_inplace(st.scores, 1.0 / static_cast<double>(q_positions));
    }
  }
  return stats;
}

}  // namespace wmla
