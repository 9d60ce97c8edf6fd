#pragma once

#include <cstdint>
#include <vector>

#include "wmla/linalg.hpp"
#include "wmla/matrix.hpp"
#include "wmla/selection.hpp"

namespace wmla {

enum class AttentionVariant { mha, mla_full, mla_preserving };

const char* to_string(AttentionVariant v);
AttentionVariant attention_variant_from_string(const std::string& s);

struct AttentionConfig {
  int64_t d_model = 0;
  int64_t n_heads = 0;
  AttentionVariant variant = AttentionVariant::mha;
  int64_t d_latent = 0;    // MLA variants only
  int64_t r_per_head = 0;  // preserving variant only

  int64_t d_head() const { return d_model / n_heads; }
  double scale() const;  // 1/sqrt(d_head)
  int64_t n_preserved() const { return 2 * r_per_head * n_heads; }
  bool is_mla() const { return variant != AttentionVariant::mha; }
  // entries cached per token per layer: 2*d_model for MHA, d_latent + n_preserved for MLA
  int64_t cache_entries_per_token() const;
  void validate() const;  // throws ConfigError
};

// Whisper convention: query, value and output projections carry biases, the
// key projection does not.
struct MhaLayerWeights {
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  Matrix b_q, b_v, b_o;       // 1 x d_model
};

struct MlaLayerWeights {
  Matrix w_q, b_q;  // query path unchanged from MHA
  Matrix w_kp;      // d_model x n_preserved, keys exempt from compression
  Matrix w_dkv;     // d_model x d_latent, joint down-projection
  Matrix w_uk;      // d_latent x (d_model - n_preserved)
  Matrix w_uv;      // d_latent x d_model
  Matrix b_v;       // 1 x d_model, applied after up-projection
  Matrix w_o, b_o;
  SubspaceSelection selection;

  // derived index maps, rebuilt by finalize()
  std::vector<int64_t> preserved_dims;   // ascending global columns of w_k kept in w_kp
  std::vector<int64_t> compressed_dims;  // ascending complement
  std::vector<std::vector<int64_t>> head_preserved_local;
  std::vector<std::vector<int64_t>> head_compressed_local;

  // Validates shapes against cfg and the selection, rebuilds the index maps.
  void finalize(const AttentionConfig& cfg);
};

enum class CacheKind { mha, mla };

// One layer's cache slot. MHA caches full keys/values, MLA caches the joint
// latent plus the preserved key columns. The slot asserts its own accounting:
// entries() == tokens() * entries_per_token() after every append.
struct KvSlot {
  CacheKind kind = CacheKind::mha;
  Matrix k, v;      // MHA
  Matrix c_kv, k_p; // MLA (k_p has zero columns under full compression)

  static KvSlot mha_slot(int64_t d_model);
  static KvSlot mla_slot(int64_t d_latent, int64_t n_preserved);

  int64_t tokens() const;
  int64_t entries_per_token() const;
  int64_t entries() const { return tokens() * entries_per_token(); }
  void append_mha(const Matrix& k_new, const Matrix& v_new);
  void append_mla(const Matrix& c_new, const Matrix& kp_new);
};

// Intermediates recorded during a forward pass; backward and the calibration
// statistics read from here. Only the fields relevant to the variant are set.
struct AttnTape {
  Matrix q;                   // S x d_model, after w_q + b_q
  Matrix k;                   // T x d_model (MLA: reconstructed full keys)
  Matrix v;                   // T x d_model
  Matrix c_kv;                // MLA: T x d_latent
  Matrix k_p;                 // MLA: T x n_preserved
  std::vector<Matrix> alpha;  // per head, S x T attention weights
  Matrix ctx;                 // S x d_model, before the output projection
};

// Scaled dot-product attention over n_heads heads. When a cache is supplied,
// x_kv holds only the new tokens to append; queries are the trailing rows of
// the cached stream for causal masking.
Matrix mha_attend(const Matrix& x_q, const Matrix& x_kv, const MhaLayerWeights& w,
                  const AttentionConfig& cfg, bool causal, KvSlot* cache = nullptr,
                  AttnTape* tape = nullptr);

// MLA forward that reconstructs full keys by scattering preserved columns and
// latent up-projections into their original positions, then attends as MHA.
Matrix mla_attend(const Matrix& x_q, const Matrix& x_kv, const MlaLayerWeights& w,
                  const AttentionConfig& cfg, bool causal, KvSlot* cache = nullptr,
                  AttnTape* tape = nullptr);

// Same math with the key up-projection folded into the query and the value
// up-projection applied after latent aggregation; full keys and values are
// never materialized. No tape: this is the inference path.
Matrix mla_attend_absorbed(const Matrix& x_q, const Matrix& x_kv, const MlaLayerWeights& w,
                           const AttentionConfig& cfg, bool causal, KvSlot* cache = nullptr);

// Row p: dimensions (2k, 2k+1) hold sin(p*w_k), cos(p*w_k) with
// w_k = 10000^(-2k/d_model).
Matrix sinusoidal_embedding(int64_t max_pos, int64_t d_model);

}  // namespace wmla
