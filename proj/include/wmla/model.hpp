#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "wmla/attention.hpp"
#include "wmla/checkpoint.hpp"

namespace wmla {

// Attention sites of the encoder-decoder architecture. Placement policies and
// per-site variants are expressed in terms of these.
enum class Site : int { encoder_self, decoder_self, cross };

const char* to_string(Site s);

// Reserved token ids; content tokens start at kFirstContentToken.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kFirstContentToken = 3;

struct ModelSpec {
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_encoder_layers = 2;
  int64_t n_decoder_layers = 2;
  int64_t d_ff = 256;
  int64_t vocab_size = 64;
  int64_t max_source_len = 128;
  int64_t max_target_len = 128;
  AttentionConfig encoder_self, decoder_self, cross;

  // All-MHA toy defaults: d_model=64, 4 heads, 2+2 layers, d_ff=256, vocab=64.
  static ModelSpec toy();

  const AttentionConfig& site(Site s) const;
  AttentionConfig& site(Site s);
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelSpec from_json(const nlohmann::ordered_json& j);
};

// One seq2seq pair. target ends with the EOS token.
struct Example {
  std::vector<int> source;
  std::vector<int> target;
};

// Teacher-forcing input: BOS followed by target[:-1].
std::vector<int> decoder_input(const Example& e);

struct LayerNormParams {
  Matrix gamma, beta;  // 1 x d
};

struct FfnWeights {
  Matrix w1, b1, w2, b2;  // d x d_ff, 1 x d_ff, d_ff x d, 1 x d
};

using AttnWeights = std::variant<MhaLayerWeights, MlaLayerWeights>;

struct EncoderLayer {
  LayerNormParams attn_ln;
  AttnWeights attn;
  LayerNormParams ffn_ln;
  FfnWeights ffn;
};

struct DecoderLayer {
  LayerNormParams self_ln;
  AttnWeights self_attn;
  LayerNormParams cross_ln;
  AttnWeights cross_attn;
  LayerNormParams ffn_ln;
  FfnWeights ffn;
};

// Toy encoder-decoder transformer mirroring Whisper's layout: sinusoidal
// encoder positions, learned decoder positions, pre-norm blocks with final
// layer norms, biasless key projections.
struct Model {
  ModelSpec spec;
  Matrix enc_tok_emb;  // vocab x d
  std::vector<EncoderLayer> enc_layers;
  LayerNormParams enc_ln_f;
  Matrix dec_tok_emb;  // vocab x d
  Matrix dec_pos_emb;  // max_target_len x d, learned
  std::vector<DecoderLayer> dec_layers;
  LayerNormParams dec_ln_f;
  Matrix w_out, b_out;  // d x vocab, 1 x vocab
  nlohmann::ordered_json conversion_record = nullptr;  // set by convert_model

  static Model random_init(const ModelSpec& spec, uint64_t seed);
  // Same structure and selections, every float tensor zeroed. Gradient and
  // optimizer-state buffers are built this way.
  Model zeros_clone() const;

  // Enumerates every trainable tensor in canonical (checkpoint) order.
  void visit_tensors(const std::function<void(const std::string&, Matrix&)>& fn);
  void visit_tensors(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  // Subspace selections of MLA sites, serialized as i32 tensors.
  void visit_selections(const std::function<void(const std::string&, SubspaceSelection&)>& fn);
  void visit_selections(const std::function<void(const std::string&, const SubspaceSelection&)>& fn) const;

  int64_t param_count() const;

  CheckpointContainer to_container() const;
  static Model from_container(const CheckpointContainer& c);
};

constexpr double kLayerNormEps = 1e-10;

struct LnTape {
  Matrix x_hat;
  std::vector<double> inv_std;
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LnTape* tape = nullptr);

double gelu(double x);
double gelu_derivative(double x);

struct AttnBlockTape {
  LnTape ln;
  Matrix ln_out;
  AttnTape attn;
};

struct FfnBlockTape {
  LnTape ln;
  Matrix ln_out;
  Matrix pre;  // ln_out*w1 + b1
  Matrix act;  // gelu(pre)
};

struct EncLayerTape {
  AttnBlockTape attn;
  FfnBlockTape ffn;
};

struct DecLayerTape {
  AttnBlockTape self;
  AttnBlockTape cross;
  FfnBlockTape ffn;
};

struct ForwardTape {
  std::vector<int> source, dec_in;
  std::vector<EncLayerTape> enc;
  LnTape enc_ln_f;
  Matrix enc_states;
  std::vector<DecLayerTape> dec;
  LnTape dec_ln_f;
  Matrix dec_final;
  Matrix logits;
};

// Full encoder pass: embeddings + sinusoidal positions, then pre-norm blocks.
Matrix encode(const Model& m, const std::vector<int>& source, ForwardTape* tape = nullptr);

// Teacher-forced full causal decoder pass; returns logits (len(dec_in) x vocab).
Matrix forward_logits(const Model& m, const std::vector<int>& source,
                      const std::vector<int>& dec_in, ForwardTape* tape = nullptr);

// Per-layer cache slots for one generation stream. Cross-attention slots are
// filled once at position 0 and stay static afterwards.
struct DecoderCaches {
  std::vector<KvSlot> self;
  std::vector<KvSlot> cross;
  bool cross_ready = false;
  int64_t position = 0;  // tokens consumed so far

  static DecoderCaches make(const ModelSpec& spec);
};

// One autoregressive step; returns the 1 x vocab logits row. MLA sites run
// the absorbed inference path.
Matrix decode_step(const Model& m, int token, int64_t position, const Matrix& enc_states,
                   DecoderCaches& caches);

// Argmax decoding until EOS or max_len tokens; ties break toward the lowest id.
std::vector<int> greedy_decode(const Model& m, const std::vector<int>& source, int64_t max_len);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace wmla
