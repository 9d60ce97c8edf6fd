#include "wmla/attention.hpp"

#include <cmath>
#include <sstream>

#include "wmla/errors.hpp"

namespace wmla {

using linalg::add_row_inplace;
using linalg::causal_softmax_rows;
using linalg::col_slice;
using linalg::gather_cols;
using linalg::matmul;
using linalg::matmul_nt;
using linalg::scatter_cols_into;
using linalg::softmax_rows;

const char* to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::mha: return "mha";
    case AttentionVariant::mla_full: return "mla_full";
    case AttentionVariant::mla_preserving: return "mla_preserving";
  }
  return "?";
}

AttentionVariant attention_variant_from_string(const std::string& s) {
  if (s == "mha") return AttentionVariant::mha;
  if (s == "mla_full") return AttentionVariant::mla_full;
  if (s == "mla_preserving") return AttentionVariant::mla_preserving;
  throw ArgumentError("unknown attention variant: " + s);
}

double AttentionConfig::scale() const { return 1.0 / std::sqrt(static_cast<double>(d_head())); }

int64_t AttentionConfig::cache_entries_per_token() const {
  return is_mla() ? d_latent + n_preserved() : 2 * d_model;
}

void AttentionConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("AttentionConfig: d_model must be a positive multiple of n_heads");
  if (d_head() % 2 != 0) throw ConfigError("AttentionConfig: d_head must be even");
  if (variant == AttentionVariant::mha) return;
  if (d_latent < 1) throw ConfigError("AttentionConfig: d_latent must be >= 1 for MLA");
  if (variant == AttentionVariant::mla_full && r_per_head != 0)
    throw ConfigError("AttentionConfig: mla_full requires r_per_head = 0");
  if (variant == AttentionVariant::mla_preserving &&
      (r_per_head < 1 || r_per_head > d_head() / 2))
    throw ConfigError("AttentionConfig: r_per_head out of range for mla_preserving");
}

void MlaLayerWeights::finalize(const AttentionConfig& cfg) {
  cfg.validate();
  if (!cfg.is_mla()) throw ConfigError("MlaLayerWeights with an MHA config");
  selection.validate();
  if (selection.n_heads != cfg.n_heads || selection.d_head != cfg.d_head() ||
      selection.r_per_head() != cfg.r_per_head)
    throw ConfigError("MlaLayerWeights: selection inconsistent with config");

  const int64_t d = cfg.d_model;
  const int64_t n_p = cfg.n_preserved();
  auto expect = [](const Matrix& m, int64_t r, int64_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      std::ostringstream os;
      os << "MlaLayerWeights: " << name << " expected " << r << "x" << c << ", got " << m.rows()
         << "x" << m.cols();
      throw ConfigError(os.str());
    }
  };
  expect(w_q, d, d, "w_q");
  expect(b_q, 1, d, "b_q");
  expect(w_kp, d, n_p, "w_kp");
  expect(w_dkv, d, cfg.d_latent, "w_dkv");
  expect(w_uk, cfg.d_latent, d - n_p, "w_uk");
  expect(w_uv, cfg.d_latent, d, "w_uv");
  expect(b_v, 1, d, "b_v");
  expect(w_o, d, d, "w_o");
  expect(b_o, 1, d, "b_o");

  preserved_dims = selection.global_preserved_dims();
  compressed_dims = selection.global_compressed_dims();
  head_preserved_local = selection.expand_to_dims();
  head_compressed_local.assign(static_cast<size_t>(cfg.n_heads), {});
  const int64_t dh = cfg.d_head();
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    std::vector<bool> kept(static_cast<size_t>(dh), false);
    for (int64_t j : head_preserved_local[static_cast<size_t>(h)]) kept[static_cast<size_t>(j)] = true;
    for (int64_t j = 0; j < dh; ++j)
      if (!kept[static_cast<size_t>(j)]) head_compressed_local[static_cast<size_t>(h)].push_back(j);
  }
}

KvSlot KvSlot::mha_slot(int64_t d_model) {
  KvSlot s;
  s.kind = CacheKind::mha;
  s.k = Matrix(0, d_model);
  s.v = Matrix(0, d_model);
  return s;
}

KvSlot KvSlot::mla_slot(int64_t d_latent, int64_t n_preserved) {
  KvSlot s;
  s.kind = CacheKind::mla;
  s.c_kv = Matrix(0, d_latent);
  s.k_p = Matrix(0, n_preserved);
  return s;
}

int64_t KvSlot::tokens() const { return kind == CacheKind::mha ? k.rows() : c_kv.rows(); }

int64_t KvSlot::entries_per_token() const {
  return kind == CacheKind::mha ? k.cols() + v.cols() : c_kv.cols() + k_p.cols();
}

void KvSlot::append_mha(const Matrix& k_new, const Matrix& v_new) {
  if (kind != CacheKind::mha) throw StateError("KvSlot: MHA append into MLA slot");
  if (k_new.rows() != v_new.rows()) throw StateError("KvSlot: key/value row mismatch");
  k.append_rows(k_new);
  v.append_rows(v_new);
  if (k.rows() != v.rows() || entries() != tokens() * entries_per_token())
    throw StateError("KvSlot: cache accounting violated");
}

void KvSlot::append_mla(const Matrix& c_new, const Matrix& kp_new) {
  if (kind != CacheKind::mla) throw StateError("KvSlot: MLA append into MHA slot");
  if (c_new.rows() != kp_new.rows()) throw StateError("KvSlot: latent/preserved row mismatch");
  c_kv.append_rows(c_new);
  k_p.append_rows(kp_new);
  // k_p may have zero columns; row bookkeeping still has to line up
  if (k_p.cols() > 0 && k_p.rows() != c_kv.rows())
    throw StateError("KvSlot: cache accounting violated");
  if (entries() != tokens() * entries_per_token())
    throw StateError("KvSlot: cache accounting violated");
}

namespace {

void check_inputs(const Matrix& x_q, const Matrix& x_kv, const AttentionConfig& cfg) {
  cfg.validate();
  if (x_q.cols() != cfg.d_model || (x_kv.rows() > 0 && x_kv.cols() != cfg.d_model))
    throw ArgumentError("attend: input width does not match d_model");
  if (x_q.rows() < 1) throw ArgumentError("attend: empty query");
}

// Per-head scaled dot-product over full-width K/V, writing the concatenated
// context. Shared by the MHA path and the naive MLA path.
Matrix attend_heads(const Matrix& q, const Matrix& keys, const Matrix& vals,
                    const AttentionConfig& cfg, bool causal, AttnTape* tape) {
  const int64_t dh = cfg.d_head();
  const int64_t s = q.rows();
  const int64_t t = keys.rows();
  const int64_t offset = t - s;
  if (causal && offset < 0) throw ArgumentError("attend: more queries than cached keys");
  Matrix ctx(s, cfg.d_model);
  if (tape) tape->alpha.assign(static_cast<size_t>(cfg.n_heads), Matrix());
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    Matrix qh = col_slice(q, h * dh, dh);
    Matrix kh = col_slice(keys, h * dh, dh);
    Matrix vh = col_slice(vals, h * dh, dh);
    Matrix scores = matmul_nt(qh, kh);
    linalg::scale_inplace(scores, cfg.scale());
    Matrix alpha = causal ? causal_softmax_rows(scores, offset) : softmax_rows(scores);
    Matrix ctx_h = matmul(alpha, vh);
    for (int64_t i = 0; i < s; ++i)
      for (int64_t j = 0; j < dh; ++j) ctx.at(i, h * dh + j) = ctx_h.at(i, j);
    if (tape) tape->alpha[static_cast<size_t>(h)] = std::move(alpha);
  }
  return ctx;
}

}  // namespace

Matrix mha_attend(const Matrix& x_q, const Matrix& x_kv, const MhaLayerWeights& w,
                  const AttentionConfig& cfg, bool causal, KvSlot* cache, AttnTape* tape) {
  check_inputs(x_q, x_kv, cfg);
  Matrix q = matmul(x_q, w.w_q);
  add_row_inplace(q, w.b_q);
  Matrix k_new = matmul(x_kv, w.w_k);
  Matrix v_new = matmul(x_kv, w.w_v);
  if (v_new.rows() > 0) add_row_inplace(v_new, w.b_v);

  const Matrix* keys = &k_new;
  const Matrix* vals = &v_new;
  if (cache) {
    cache->append_mha(k_new, v_new);
    keys = &cache->k;
    vals = &cache->v;
  }
  Matrix ctx = attend_heads(q, *keys, *vals, cfg, causal, tape);
  Matrix out = matmul(ctx, w.w_o);
  add_row_inplace(out, w.b_o);
  if (tape) {
    tape->k = *keys;
    tape->v = *vals;
    tape->q = std::move(q);
    tape->ctx = std::move(ctx);
  }
  return out;
}

Matrix mla_attend(const Matrix& x_q, const Matrix& x_kv, const MlaLayerWeights& w,
                  const AttentionConfig& cfg, bool causal, KvSlot* cache, AttnTape* tape) {
  check_inputs(x_q, x_kv, cfg);
  if (static_cast<int64_t>(w.preserved_dims.size()) != cfg.n_preserved())
    throw ConfigError("mla_attend: weights not finalized against this config");

  Matrix q = matmul(x_q, w.w_q);
  add_row_inplace(q, w.b_q);
  Matrix c_new = matmul(x_kv, w.w_dkv);
  Matrix kp_new = matmul(x_kv, w.w_kp);

  const Matrix* latent = &c_new;
  const Matrix* kp = &kp_new;
  if (cache) {
    cache->append_mla(c_new, kp_new);
    latent = &cache->c_kv;
    kp = &cache->k_p;
  }

  // scatter preserved and up-projected columns back to original key positions
  Matrix k_c = matmul(*latent, w.w_uk);
  Matrix keys(latent->rows(), cfg.d_model);
  scatter_cols_into(keys, *kp, w.preserved_dims);
  scatter_cols_into(keys, k_c, w.compressed_dims);
  Matrix vals = matmul(*latent, w.w_uv);
  if (vals.rows() > 0) add_row_inplace(vals, w.b_v);

  Matrix ctx = attend_heads(q, keys, vals, cfg, causal, tape);
  Matrix out = matmul(ctx, w.w_o);
  add_row_inplace(out, w.b_o);
  if (tape) {
    tape->q = std::move(q);
    tape->k = std::move(keys);
    tape->v = std::move(vals);
    tape->c_kv = *latent;
    tape->k_p = *kp;
    tape->ctx = std::move(ctx);
  }
  return out;
}

Matrix mla_attend_absorbed(const Matrix& x_q, const Matrix& x_kv, const MlaLayerWeights& w,
                           const AttentionConfig& cfg, bool causal, KvSlot* cache) {
  check_inputs(x_q, x_kv, cfg);
  if (static_cast<int64_t>(w.preserved_dims.size()) != cfg.n_preserved())
    throw ConfigError("mla_attend_absorbed: weights not finalized against this config");

  Matrix q = matmul(x_q, w.w_q);
  add_row_inplace(q, w.b_q);
  Matrix c_new = matmul(x_kv, w.w_dkv);
  Matrix kp_new = matmul(x_kv, w.w_kp);

  const Matrix* latent = &c_new;
  const Matrix* kp = &kp_new;
  if (cache) {
    cache->append_mla(c_new, kp_new);
    latent = &cache->c_kv;
    kp = &cache->k_p;
  }

  const int64_t dh = cfg.d_head();
  const int64_t n_c = dh - 2 * cfg.r_per_head;  // compressed dims per head
  const int64_t s = q.rows();
  const int64_t t = latent->rows();
  const int64_t offset = t - s;
  if (causal && offset < 0) throw ArgumentError("attend: more queries than cached keys");

  Matrix ctx(s, cfg.d_model);
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    std::vector<int64_t> pres_global, comp_global;
    for (int64_t j : w.head_preserved_local[static_cast<size_t>(h)]) pres_global.push_back(h * dh + j);
    for (int64_t j : w.head_compressed_local[static_cast<size_t>(h)]) comp_global.push_back(h * dh + j);

    Matrix q_c = gather_cols(q, comp_global);
    Matrix w_uk_h = col_slice(w.w_uk, h * n_c, n_c);
    // fold the key up-projection into the query: scores on the latent directly
    Matrix scores = matmul_nt(matmul_nt(q_c, w_uk_h), *latent);
    if (!pres_global.empty()) {
      Matrix q_p = gather_cols(q, pres_global);
      Matrix kp_h = col_slice(*kp, h * 2 * cfg.r_per_head, 2 * cfg.r_per_head);
      linalg::axpy_inplace(scores, matmul_nt(q_p, kp_h));
    }
    linalg::scale_inplace(scores, cfg.scale());
    Matrix alpha = causal ? causal_softmax_rows(scores, offset) : softmax_rows(scores);
    // aggregate latents, then up-project once per head
    Matrix ctx_lat = matmul(alpha, *latent);
    Matrix out_h = matmul(ctx_lat, col_slice(w.w_uv, h * dh, dh));
    for (int64_t i = 0; i < s; ++i)
      for (int64_t j = 0; j < dh; ++j) ctx.at(i, h * dh + j) = out_h.at(i, j) + w.b_v.at(0, h * dh + j);
  }
  Matrix out = matmul(ctx, w.w_o);
  add_row_inplace(out, w.b_o);
  return out;
}

Matrix sinusoidal_embedding(int64_t max_pos, int64_t d_model) {
  if (d_model % 2 != 0) throw ArgumentError("sinusoidal_embedding: d_model must be even");
  if (max_pos < 0) throw ArgumentError("sinusoidal_embedding: negative max_pos");
  Matrix e(max_pos, d_model);
  for (int64_t p = 0; p < max_pos; ++p) {
    for (int64_t k = 0; k < d_model / 2; ++k) {
      const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d_model));
      e.at(p, 2 * k) = std::sin(static_cast<double>(p) * omega);
      e.at(p, 2 * k + 1) = std::cos(static_cast<double>(p) * omega);
    }
  }
  return e;
}

}  // namespace wmla
