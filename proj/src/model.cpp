#include "wmla/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "wmla/errors.hpp"
#include "wmla/rng.hpp"

namespace wmla {

using linalg::add_row_inplace;
using linalg::axpy_inplace;
using linalg::matmul;

const char* to_string(Site s) {
  switch (s) {
    case Site::encoder_self: return "encoder_self";
    case Site::decoder_self: return "decoder_self";
    case Site::cross: return "cross";
  }
  return "?";
}

ModelSpec ModelSpec::toy() {
  ModelSpec s;
  for (Site site : {Site::encoder_self, Site::decoder_self, Site::cross}) {
    AttentionConfig& c = s.site(site);
    c.d_model = s.d_model;
    c.n_heads = s.n_heads;
    c.variant = AttentionVariant::mha;
  }
  return s;
}

const AttentionConfig& ModelSpec::site(Site s) const {
  switch (s) {
    case Site::encoder_self: return encoder_self;
    case Site::decoder_self: return decoder_self;
    case Site::cross: return cross;
  }
  throw ArgumentError("ModelSpec::site: bad site");
}

AttentionConfig& ModelSpec::site(Site s) {
  return const_cast<AttentionConfig&>(static_cast<const ModelSpec*>(this)->site(s));
}

void ModelSpec::validate() const {
  if (d_model < 1 || n_heads < 1 || n_encoder_layers < 1 || n_decoder_layers < 1 || d_ff < 1)
    throw ConfigError("ModelSpec: counts must be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("ModelSpec: d_model must be divisible by n_heads");
  if (vocab_size < kFirstContentToken + 1)
    throw ConfigError("ModelSpec: vocab_size leaves no room for content tokens");
  if (max_source_len < 1 || max_target_len < 1) throw ConfigError("ModelSpec: max lengths must be >= 1");
  for (Site s : {Site::encoder_self, Site::decoder_self, Site::cross}) {
    const AttentionConfig& c = site(s);
    if (c.d_model != d_model || c.n_heads != n_heads)
      throw ConfigError("ModelSpec: site config dimensions disagree with the model");
    c.validate();
  }
}

static nlohmann::ordered_json site_to_json(const AttentionConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = to_string(c.variant);
  j["d_latent"] = c.d_latent;
  j["r_per_head"] = c.r_per_head;
  return j;
}

nlohmann::ordered_json ModelSpec::to_json() const {
  nlohmann::ordered_json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_encoder_layers"] = n_encoder_layers;
  j["n_decoder_layers"] = n_decoder_layers;
  j["d_ff"] = d_ff;
  j["vocab_size"] = vocab_size;
  j["max_source_len"] = max_source_len;
  j["max_target_len"] = max_target_len;
  nlohmann::ordered_json sites;
  sites["encoder_self"] = site_to_json(encoder_self);
  sites["decoder_self"] = site_to_json(decoder_self);
  sites["cross"] = site_to_json(cross);
  j["sites"] = std::move(sites);
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::ordered_json& j) {
  ModelSpec s;
  try {
    s.d_model = j.at("d_model").get<int64_t>();
    s.n_heads = j.at("n_heads").get<int64_t>();
    s.n_encoder_layers = j.at("n_encoder_layers").get<int64_t>();
    s.n_decoder_layers = j.at("n_decoder_layers").get<int64_t>();
    s.d_ff = j.at("d_ff").get<int64_t>();
    s.vocab_size = j.at("vocab_size").get<int64_t>();
    s.max_source_len = j.at("max_source_len").get<int64_t>();
    s.max_target_len = j.at("max_target_len").get<int64_t>();
    for (Site site : {Site::encoder_self, Site::decoder_self, Site::cross}) {
      const auto& sj = j.at("sites").at(to_string(site));
      AttentionConfig& c = s.site(site);
      c.d_model = s.d_model;
      c.n_heads = s.n_heads;
      c.variant = attention_variant_from_string(sj.at("variant").get<std::string>());
      c.d_latent = sj.at("d_latent").get<int64_t>();
      c.r_per_head = sj.at("r_per_head").get<int64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model_spec: ") + e.what());
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model_spec: ") + e.what());
  }
  return s;
}

std::vector<int> decoder_input(const Example& e) {
  std::vector<int> in;
  in.reserve(e.target.size());
  in.push_back(kBosToken);
  in.insert(in.end(), e.target.begin(), e.target.end() - (e.target.empty() ? 0 : 1));
  return in;
}

namespace {

Matrix xavier(Rng& rng, int64_t rows, int64_t cols) {
  return rng.normal_matrix(rows, cols, std::sqrt(2.0 / static_cast<double>(rows + cols)));
}

AttnWeights make_attn_weights(const AttentionConfig& cfg, Rng* rng) {
  const int64_t d = cfg.d_model;
  auto mat = [&](int64_t r, int64_t c) { return rng ? xavier(*rng, r, c) : Matrix(r, c); };
  if (!cfg.is_mla()) {
    MhaLayerWeights w;
    w.w_q = mat(d, d);
    w.w_k = mat(d, d);
    w.w_v = mat(d, d);
    w.w_o = mat(d, d);
    w.b_q = Matrix(1, d);
    w.b_v = Matrix(1, d);
    w.b_o = Matrix(1, d);
    return w;
  }
  MlaLayerWeights w;
  const int64_t n_p = cfg.n_preserved();
  w.w_q = mat(d, d);
  w.b_q = Matrix(1, d);
  w.w_kp = mat(d, n_p);
  w.w_dkv = mat(d, cfg.d_latent);
  w.w_uk = mat(cfg.d_latent, d - n_p);
  w.w_uv = mat(cfg.d_latent, d);
  w.b_v = Matrix(1, d);
  w.w_o = mat(d, d);
  w.b_o = Matrix(1, d);
  w.selection = cfg.r_per_head > 0 ? uniform_selection(cfg.n_heads, cfg.d_head(), cfg.r_per_head)
                                   : full_compression_selection(cfg.n_heads, cfg.d_head());
  w.finalize(cfg);
  return w;
}

LayerNormParams make_ln(int64_t d, bool ones) {
  LayerNormParams p;
  p.gamma = Matrix(1, d);
  p.beta = Matrix(1, d);
  if (ones) p.gamma.fill(1.0);
  return p;
}

FfnWeights make_ffn(int64_t d, int64_t d_ff, Rng* rng) {
  FfnWeights f;
  f.w1 = rng ? xavier(*rng, d, d_ff) : Matrix(d, d_ff);
  f.b1 = Matrix(1, d_ff);
  f.w2 = rng ? xavier(*rng, d_ff, d) : Matrix(d_ff, d);
  f.b2 = Matrix(1, d);
  return f;
}

Model build_model(const ModelSpec& spec, Rng* rng) {
  spec.validate();
  Model m;
  m.spec = spec;
  const int64_t d = spec.d_model;
  m.enc_tok_emb = rng ? rng->normal_matrix(spec.vocab_size, d, 1.0) : Matrix(spec.vocab_size, d);
  for (int64_t l = 0; l < spec.n_encoder_layers; ++l) {
    EncoderLayer layer;
    layer.attn_ln = make_ln(d, rng != nullptr);
    layer.attn = make_attn_weights(spec.encoder_self, rng);
    layer.ffn_ln = make_ln(d, rng != nullptr);
    layer.ffn = make_ffn(d, spec.d_ff, rng);
    m.enc_layers.push_back(std::move(layer));
  }
  m.enc_ln_f = make_ln(d, rng != nullptr);
  m.dec_tok_emb = rng ? rng->normal_matrix(spec.vocab_size, d, 1.0) : Matrix(spec.vocab_size, d);
  // learned decoder positions, seeded normal sigma=0.02
  m.dec_pos_emb = rng ? rng->normal_matrix(spec.max_target_len, d, 0.02) : Matrix(spec.max_target_len, d);
  for (int64_t l = 0; l < spec.n_decoder_layers; ++l) {
    DecoderLayer layer;
    layer.self_ln = make_ln(d, rng != nullptr);
    layer.self_attn = make_attn_weights(spec.decoder_self, rng);
    layer.cross_ln = make_ln(d, rng != nullptr);
    layer.cross_attn = make_attn_weights(spec.cross, rng);
    layer.ffn_ln = make_ln(d, rng != nullptr);
    layer.ffn = make_ffn(d, spec.d_ff, rng);
    m.dec_layers.push_back(std::move(layer));
  }
  m.dec_ln_f = make_ln(d, rng != nullptr);
  m.w_out = rng ? xavier(*rng, d, spec.vocab_size) : Matrix(d, spec.vocab_size);
  m.b_out = Matrix(1, spec.vocab_size);
  return m;
}

using TensorFn = std::function<void(const std::string&, Matrix&)>;

void visit_attn(const std::string& prefix, AttnWeights& w, const TensorFn& fn) {
  if (auto* mha = std::get_if<MhaLayerWeights>(&w)) {
    fn(prefix + ".w_q", mha->w_q);
    fn(prefix + ".b_q", mha->b_q);
    fn(prefix + ".w_k", mha->w_k);
    fn(prefix + ".w_v", mha->w_v);
    fn(prefix + ".b_v", mha->b_v);
    fn(prefix + ".w_o", mha->w_o);
    fn(prefix + ".b_o", mha->b_o);
  } else {
    auto* mla = std::get_if<MlaLayerWeights>(&w);
    fn(prefix + ".w_q", mla->w_q);
    fn(prefix + ".b_q", mla->b_q);
    fn(prefix + ".w_kp", mla->w_kp);
    fn(prefix + ".w_dkv", mla->w_dkv);
    fn(prefix + ".w_uk", mla->w_uk);
    fn(prefix + ".w_uv", mla->w_uv);
    fn(prefix + ".b_v", mla->b_v);
    fn(prefix + ".w_o", mla->w_o);
    fn(prefix + ".b_o", mla->b_o);
  }
}

void visit_ln(const std::string& prefix, LayerNormParams& p, const TensorFn& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

void visit_ffn(const std::string& prefix, FfnWeights& f, const TensorFn& fn) {
  fn(prefix + ".w1", f.w1);
  fn(prefix + ".b1", f.b1);
  fn(prefix + ".w2", f.w2);
  fn(prefix + ".b2", f.b2);
}

}  // namespace

Model Model::random_init(const ModelSpec& spec, uint64_t seed) {
  Rng rng(seed);
  return build_model(spec, &rng);
}

Model Model::zeros_clone() const {
  Model m = *this;
  m.visit_tensors([](const std::string&, Matrix& t) { t.fill(0.0); });
  return m;
}

void Model::visit_tensors(const TensorFn& fn) {
  fn("enc.tok_emb", enc_tok_emb);
  for (size_t l = 0; l < enc_layers.size(); ++l) {
    const std::string p = "enc.layers." + std::to_string(l);
    visit_ln(p + ".attn_ln", enc_layers[l].attn_ln, fn);
    visit_attn(p + ".attn", enc_layers[l].attn, fn);
    visit_ln(p + ".ffn_ln", enc_layers[l].ffn_ln, fn);
    visit_ffn(p + ".ffn", enc_layers[l].ffn, fn);
  }
  visit_ln("enc.ln_f", enc_ln_f, fn);
  fn("dec.tok_emb", dec_tok_emb);
  fn("dec.pos_emb", dec_pos_emb);
  for (size_t l = 0; l < dec_layers.size(); ++l) {
    const std::string p = "dec.layers." + std::to_string(l);
    visit_ln(p + ".self_ln", dec_layers[l].self_ln, fn);
    visit_attn(p + ".self", dec_layers[l].self_attn, fn);
    visit_ln(p + ".cross_ln", dec_layers[l].cross_ln, fn);
    visit_attn(p + ".cross", dec_layers[l].cross_attn, fn);
    visit_ln(p + ".ffn_ln", dec_layers[l].ffn_ln, fn);
    visit_ffn(p + ".ffn", dec_layers[l].ffn, fn);
  }
  visit_ln("dec.ln_f", dec_ln_f, fn);
  fn("out.w", w_out);
  fn("out.b", b_out);
}

void Model::visit_tensors(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<Model*>(this)->visit_tensors(
      [&fn](const std::string& name, Matrix& m) { fn(name, m); });
}

void Model::visit_selections(const std::function<void(const std::string&, SubspaceSelection&)>& fn) {
  auto maybe = [&](const std::string& name, AttnWeights& w) {
    if (auto* mla = std::get_if<MlaLayerWeights>(&w)) fn(name, mla->selection);
  };
  for (size_t l = 0; l < enc_layers.size(); ++l)
    maybe("enc.layers." + std::to_string(l) + ".attn.selection", enc_layers[l].attn);
  for (size_t l = 0; l < dec_layers.size(); ++l) {
    maybe("dec.layers." + std::to_string(l) + ".self.selection", dec_layers[l].self_attn);
    maybe("dec.layers." + std::to_string(l) + ".cross.selection", dec_layers[l].cross_attn);
  }
}

void Model::visit_selections(
    const std::function<void(const std::string&, const SubspaceSelection&)>& fn) const {
  const_cast<Model*>(this)->visit_selections(
      [&fn](const std::string& name, SubspaceSelection& s) { fn(name, s); });
}

int64_t Model::param_count() const {
  int64_t n = 0;
  visit_tensors([&n](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LnTape* tape) {
  const int64_t d = x.cols();
  if (p.gamma.cols() != d || p.beta.cols() != d) throw ArgumentError("layer_norm: width mismatch");
  Matrix y(x.rows(), d);
  if (tape) {
    tape->x_hat = Matrix(x.rows(), d);
    tape->inv_std.assign(static_cast<size_t>(x.rows()), 0.0);
  }
  for (int64_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i);
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    double* yi = y.row(i);
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mu) * inv_std;
      if (tape) tape->x_hat.at(i, j) = xh;
      yi[j] = p.gamma.at(0, j) * xh + p.beta.at(0, j);
    }
    if (tape) tape->inv_std[static_cast<size_t>(i)] = inv_std;
  }
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_derivative(double x) {
  const double phi_cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double phi_pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return phi_cdf + x * phi_pdf;
}

namespace {

void check_tokens(const std::vector<int>& toks, int64_t vocab, const char* who) {
  for (int t : toks)
    if (t < 0 || t >= vocab) throw ArgumentError(std::string(who) + ": token id out of vocabulary");
}

Matrix embed_rows(const Matrix& table, const std::vector<int>& ids) {
  Matrix out(static_cast<int64_t>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i)
    for (int64_t j = 0; j < table.cols(); ++j) out.at(static_cast<int64_t>(i), j) = table.at(ids[i], j);
  return out;
}

// Dispatch over the site's variant. Inference paths (cache != nullptr with no
// tape) take the absorbed route for MLA; the taped training/calibration path
// materializes keys so backward can read them.
Matrix attend_site(const AttnWeights& w, const AttentionConfig& cfg, const Matrix& x_q,
                   const Matrix& x_kv, bool causal, KvSlot* cache, AttnTape* tape) {
  if (const auto* mha = std::get_if<MhaLayerWeights>(&w))
    return mha_attend(x_q, x_kv, *mha, cfg, causal, cache, tape);
  const auto& mla = std::get<MlaLayerWeights>(w);
  if (cache && !tape) return mla_attend_absorbed(x_q, x_kv, mla, cfg, causal, cache);
  return mla_attend(x_q, x_kv, mla, cfg, causal, cache, tape);
}

Matrix run_ffn(const Matrix& x, const FfnWeights& f, const LayerNormParams& ln, FfnBlockTape* tape) {
  LnTape* lt = tape ? &tape->ln : nullptr;
  Matrix a = layer_norm(x, ln, lt);
  Matrix pre = matmul(a, f.w1);
  add_row_inplace(pre, f.b1);
  Matrix act(pre.rows(), pre.cols());
  for (int64_t i = 0; i < pre.size(); ++i)
    act.data()[static_cast<size_t>(i)] = gelu(pre.data()[static_cast<size_t>(i)]);
  Matrix out = matmul(act, f.w2);
  add_row_inplace(out, f.b2);
  if (tape) {
    tape->ln_out = std::move(a);
    tape->pre = std::move(pre);
    tape->act = std::move(act);
  }
  return out;
}

}  // namespace

Matrix encode(const Model& m, const std::vector<int>& source, ForwardTape* tape) {
  const ModelSpec& spec = m.spec;
  if (source.empty()) throw ArgumentError("encode: empty source");
  if (static_cast<int64_t>(source.size()) > spec.max_source_len)
    throw ArgumentError("encode: source longer than max_source_len");
  check_tokens(source, spec.vocab_size, "encode");

  Matrix x = embed_rows(m.enc_tok_emb, source);
  Matrix pos = sinusoidal_embedding(x.rows(), spec.d_model);
  axpy_inplace(x, pos);
  if (tape) {
    tape->source = source;
    tape->enc.resize(m.enc_layers.size());
  }
  for (size_t l = 0; l < m.enc_layers.size(); ++l) {
    const EncoderLayer& layer = m.enc_layers[l];
    AttnBlockTape* at = tape ? &tape->enc[l].attn : nullptr;
    Matrix a = layer_norm(x, layer.attn_ln, at ? &at->ln : nullptr);
    Matrix y = attend_site(layer.attn, spec.encoder_self, a, a, /*causal=*/false, nullptr,
                           at ? &at->attn : nullptr);
    if (at) at->ln_out = std::move(a);
    axpy_inplace(x, y);
    FfnBlockTape* ft = tape ? &tape->enc[l].ffn : nullptr;
    Matrix y2 = run_ffn(x, layer.ffn, layer.ffn_ln, ft);
    axpy_inplace(x, y2);
  }
  Matrix states = layer_norm(x, m.enc_ln_f, tape ? &tape->enc_ln_f : nullptr);
  if (tape) tape->enc_states = states;
  return states;
}

Matrix forward_logits(const Model& m, const std::vector<int>& source,
                      const std::vector<int>& dec_in, ForwardTape* tape) {
  const ModelSpec& spec = m.spec;
  Matrix enc_states = encode(m, source, tape);
  if (dec_in.empty()) throw ArgumentError("forward_logits: empty decoder input");
  if (static_cast<int64_t>(dec_in.size()) > spec.max_target_len)
    throw ArgumentError("forward_logits: decoder input longer than max_target_len");
  check_tokens(dec_in, spec.vocab_size, "forward_logits");

  Matrix x = embed_rows(m.dec_tok_emb, dec_in);
  for (int64_t i = 0; i < x.rows(); ++i)
    for (int64_t j = 0; j < spec.d_model; ++j) x.at(i, j) += m.dec_pos_emb.at(i, j);
  if (tape) {
    tape->dec_in = dec_in;
    tape->dec.resize(m.dec_layers.size());
  }
  for (size_t l = 0; l < m.dec_layers.size(); ++l) {
    const DecoderLayer& layer = m.dec_layers[l];
    AttnBlockTape* st = tape ? &tape->dec[l].self : nullptr;
    Matrix a = layer_norm(x, layer.self_ln, st ? &st->ln : nullptr);
    Matrix y = attend_site(layer.self_attn, spec.decoder_self, a, a, /*causal=*/true, nullptr,
                           st ? &st->attn : nullptr);
    if (st) st->ln_out = std::move(a);
    axpy_inplace(x, y);

    AttnBlockTape* ct = tape ? &tape->dec[l].cross : nullptr;
    Matrix b = layer_norm(x, layer.cross_ln, ct ? &ct->ln : nullptr);
    Matrix y2 = attend_site(layer.cross_attn, spec.cross, b, enc_states, /*causal=*/false, nullptr,
                            ct ? &ct->attn : nullptr);
    if (ct) ct->ln_out = std::move(b);
    axpy_inplace(x, y2);

    FfnBlockTape* ft = tape ? &tape->dec[l].ffn : nullptr;
    Matrix y3 = run_ffn(x, layer.ffn, layer.ffn_ln, ft);
    axpy_inplace(x, y3);
  }
  Matrix final = layer_norm(x, m.dec_ln_f, tape ? &tape->dec_ln_f : nullptr);
  Matrix logits = matmul(final, m.w_out);
  add_row_inplace(logits, m.b_out);
  if (tape) {
    tape->dec_final = std::move(final);
    tape->logits = logits;
  }
  return logits;
}

DecoderCaches DecoderCaches::make(const ModelSpec& spec) {
  DecoderCaches c;
  auto slot = [&](const AttentionConfig& cfg) {
    return cfg.is_mla() ? KvSlot::mla_slot(cfg.d_latent, cfg.n_preserved())
                        : KvSlot::mha_slot(cfg.d_model);
  };
  for (int64_t l = 0; l < spec.n_decoder_layers; ++l) {
    c.self.push_back(slot(spec.decoder_self));
    c.cross.push_back(slot(spec.cross));
  }
  return c;
}

Matrix decode_step(const Model& m, int token, int64_t position, const Matrix& enc_states,
                   DecoderCaches& caches) {
  const ModelSpec& spec = m.spec;
  if (position < 0 || position >= spec.max_target_len)
    throw ArgumentError("decode_step: position out of range");
  if (caches.position != position)
    throw StateError("decode_step: caches sized to " + std::to_string(caches.position) +
                     " but position is " + std::to_string(position));
  if (token < 0 || token >= spec.vocab_size) throw ArgumentError("decode_step: bad token id");
  if (position > 0 && !caches.cross_ready)
    throw StateError("decode_step: cross cache missing for a non-initial position");

  Matrix x(1, spec.d_model);
  for (int64_t j = 0; j < spec.d_model; ++j)
    x.at(0, j) = m.dec_tok_emb.at(token, j) + m.dec_pos_emb.at(position, j);

  const Matrix empty_kv(0, spec.d_model);
  for (size_t l = 0; l < m.dec_layers.size(); ++l) {
    const DecoderLayer& layer = m.dec_layers[l];
    Matrix a = layer_norm(x, layer.self_ln);
    Matrix y = attend_site(layer.self_attn, spec.decoder_self, a, a, /*causal=*/true,
                           &caches.self[l], nullptr);
    axpy_inplace(x, y);

    Matrix b = layer_norm(x, layer.cross_ln);
    // encoder keys/values are computed once per utterance and reused
    const Matrix& kv = position == 0 ? enc_states : empty_kv;
    Matrix y2 = attend_site(layer.cross_attn, spec.cross, b, kv, /*causal=*/false,
                            &caches.cross[l], nullptr);
    axpy_inplace(x, y2);

    Matrix y3 = run_ffn(x, layer.ffn, layer.ffn_ln, nullptr);
    axpy_inplace(x, y3);
  }
  Matrix final = layer_norm(x, m.dec_ln_f);
  Matrix logits = matmul(final, m.w_out);
  add_row_inplace(logits, m.b_out);
  caches.position = position + 1;
  caches.cross_ready = true;
  return logits;
}

std::vector<int> greedy_decode(const Model& m, const std::vector<int>& source, int64_t max_len) {
  Matrix enc_states = encode(m, source);
  DecoderCaches caches = DecoderCaches::make(m.spec);
  std::vector<int> out;
  int token = kBosToken;
  for (int64_t pos = 0; pos < m.spec.max_target_len; ++pos) {
    Matrix logits = decode_step(m, token, pos, enc_states, caches);
    int best = 0;
    for (int64_t j = 1; j < logits.cols(); ++j)
      if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
    if (best == kEosToken) break;
    out.push_back(best);
    if (static_cast<int64_t>(out.size()) >= max_len) break;
    token = best;
  }
  return out;
}

CheckpointContainer Model::to_container() const {
  CheckpointContainer c;
  c.model_spec = spec.to_json();
  c.conversion_spec = conversion_record;
  visit_tensors([&c](const std::string& name, const Matrix& m) { c.add_f32(name, m); });
  visit_selections([&c](const std::string& name, const SubspaceSelection& s) {
    std::vector<int32_t> values;
    for (const auto& subs : s.per_head)
      for (int64_t k : subs) values.push_back(static_cast<int32_t>(k));
    c.add_i32(name, {s.n_heads, s.r_per_head()}, values);
  });
  return c;
}

Model Model::from_container(const CheckpointContainer& c) {
  const ModelSpec spec = ModelSpec::from_json(c.model_spec);
  Model m = build_model(spec, nullptr);
  std::set<std::string> consumed;

  m.visit_tensors([&](const std::string& name, Matrix& t) {
    const TensorRecord* rec = c.find(name);
    if (!rec) throw FormatError("tensors: missing tensor " + name);
    Matrix loaded = CheckpointContainer::as_matrix(*rec);
    if (!loaded.same_shape(t))
      throw FormatError("tensors.shape: unexpected shape for " + name);
    t = std::move(loaded);
    consumed.insert(name);
  });
  m.visit_selections([&](const std::string& name, SubspaceSelection& sel) {
    const TensorRecord* rec = c.find(name);
    if (!rec) throw FormatError("tensors: missing selection tensor " + name);
    if (rec->shape.size() != 2 || rec->shape[0] != sel.n_heads || rec->shape[1] != sel.r_per_head())
      throw FormatError("tensors.shape: unexpected selection shape for " + name);
    const auto values = CheckpointContainer::as_i32(*rec);
    size_t idx = 0;
    for (auto& subs : sel.per_head)
      for (auto& k : subs) k = values[idx++];
    try {
      sel.validate();
    } catch (const ConfigError& e) {
      throw FormatError("tensors: invalid selection " + name + " (" + e.what() + ")");
    }
    consumed.insert(name);
  });
  if (consumed.size() != c.tensors.size()) {
    for (const auto& t : c.tensors)
      if (!consumed.count(t.name)) throw FormatError("tensors: unexpected tensor " + t.name);
  }

  // selections are loaded; rebuild derived index maps
  try {
    for (auto& layer : m.enc_layers)
      if (auto* mla = std::get_if<MlaLayerWeights>(&layer.attn)) mla->finalize(spec.encoder_self);
    for (auto& layer : m.dec_layers) {
      if (auto* mla = std::get_if<MlaLayerWeights>(&layer.self_attn)) mla->finalize(spec.decoder_self);
      if (auto* mla = std::get_if<MlaLayerWeights>(&layer.cross_attn)) mla->finalize(spec.cross);
    }
  } catch (const ConfigError& e) {
    throw FormatError(std::string("tensors: inconsistent MLA weights (") + e.what() + ")");
  }
  m.conversion_record = c.conversion_spec;
  return m;
}

void save_checkpoint(const Model& m, const std::string& path) { m.to_container().write_file(path); }

Model load_checkpoint(const std::string& path) {
  return Model::from_container(CheckpointContainer::read_file(path));
}

}  // namespace wmla
