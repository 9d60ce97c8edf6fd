#include "wmla/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "wmla/errors.hpp"
#include "wmla/rng.hpp"

namespace wmla {

using linalg::col_slice;
using linalg::gather_cols;
using linalg::matmul;
using linalg::matmul_nt;
using linalg::matmul_tn;

SyntheticTask::Kind task_kind_from_string(const std::string& s) {
  if (s == "copy") return SyntheticTask::Kind::copy;
  if (s == "reverse") return SyntheticTask::Kind::reverse;
  throw ArgumentError("unknown task kind: " + s);
}

const char* to_string(SyntheticTask::Kind k) {
  return k == SyntheticTask::Kind::copy ? "copy" : "reverse";
}

std::vector<Example> generate_dataset(const SyntheticTask& task) {
  if (task.vocab_size <= kFirstContentToken)
    throw ArgumentError("generate_dataset: vocab leaves no content tokens");
  if (task.min_len < 1 || task.min_len > task.max_len)
    throw ArgumentError("generate_dataset: bad length range");
  if (task.sample_count < 1) throw ArgumentError("generate_dataset: sample_count must be >= 1");
  Rng rng(task.seed);
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(task.sample_count));
  for (int64_t i = 0; i < task.sample_count; ++i) {
    const int64_t len = rng.uniform_int(task.min_len, task.max_len + 1);
    Example e;
    e.source.reserve(static_cast<size_t>(len));
    for (int64_t j = 0; j < len; ++j)
      e.source.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, task.vocab_size)));
    e.target = e.source;
    if (task.kind == SyntheticTask::Kind::reverse)
      std::reverse(e.target.begin(), e.target.end());
    e.target.push_back(kEosToken);
    out.push_back(std::move(e));
  }
  return out;
}

DatasetSplit split_dataset(std::vector<Example> all) {
  if (all.empty()) throw ArgumentError("split_dataset: empty dataset");
  const size_t held = std::max<size_t>(1, all.size() / 10);
  DatasetSplit s;
  s.heldout.assign(all.end() - static_cast<int64_t>(held), all.end());
  all.resize(all.size() - held);
  s.train = std::move(all);
  return s;
}

bool FreezeSet::frozen(const std::string& name) const {
  if (encoder && name.rfind("enc.", 0) == 0) return true;
  if (cross_attention && name.find(".cross") != std::string::npos) return true;
  return false;
}

namespace {

Matrix colsum(const Matrix& m) {
  Matrix out(1, m.cols());
  for (int64_t i = 0; i < m.rows(); ++i)
    for (int64_t j = 0; j < m.cols(); ++j) out.at(0, j) += m.at(i, j);
  return out;
}

void add_into(Matrix& acc, const Matrix& x) { linalg::axpy_inplace(acc, x); }

// d_x may alias d_y: every read of d_y for row i happens before the write.
// Parameter gradients are accumulated in a separate pass so the d_x chain is
// the same code with or without them (keeps freeze runs bit-comparable).
void ln_backward(const LnTape& t, const LayerNormParams& p, const Matrix& d_y,
                 LayerNormParams* gp, Matrix& d_x) {
  const int64_t d = d_y.cols();
  if (gp) {
    for (int64_t i = 0; i < d_y.rows(); ++i)
      for (int64_t j = 0; j < d; ++j) {
        gp->gamma.at(0, j) += d_y.at(i, j) * t.x_hat.at(i, j);
        gp->beta.at(0, j) += d_y.at(i, j);
      }
  }
  std::vector<double> g(static_cast<size_t>(d));
  for (int64_t i = 0; i < d_y.rows(); ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double gv = d_y.at(i, j) * p.gamma.at(0, j);
      g[static_cast<size_t>(j)] = gv;
      m1 += gv;
      m2 += gv * t.x_hat.at(i, j);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    const double is = t.inv_std[static_cast<size_t>(i)];
    for (int64_t j = 0; j < d; ++j)
      d_x.at(i, j) += is * (g[static_cast<size_t>(j)] - m1 - t.x_hat.at(i, j) * m2);
  }
}

void ffn_backward(const FfnWeights& f, const LayerNormParams& ln, const FfnBlockTape& t,
                  const Matrix& d_y, FfnWeights* gf, LayerNormParams* gln, Matrix& d_x) {
  Matrix d_act = matmul_nt(d_y, f.w2);
  if (gf) {
    add_into(gf->w2, matmul_tn(t.act, d_y));
    add_into(gf->b2, colsum(d_y));
  }
  Matrix d_pre = std::move(d_act);
  for (int64_t i = 0; i < d_pre.size(); ++i)
    d_pre.data()[static_cast<size_t>(i)] *= gelu_derivative(t.pre.data()[static_cast<size_t>(i)]);
  if (gf) {
    add_into(gf->w1, matmul_tn(t.ln_out, d_pre));
    add_into(gf->b1, colsum(d_pre));
  }
  Matrix d_ln_out = matmul_nt(d_pre, f.w1);
  ln_backward(t.ln, ln, d_ln_out, gln, d_x);
}

// d_scores = alpha .* (d_alpha - rowdot(d_alpha, alpha)); masked entries have
// alpha = 0 and drop out on their own.
Matrix softmax_backward(const Matrix& alpha, const Matrix& d_alpha) {
  Matrix out(alpha.rows(), alpha.cols());
  for (int64_t i = 0; i < alpha.rows(); ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < alpha.cols(); ++j) dot += d_alpha.at(i, j) * alpha.at(i, j);
    for (int64_t j = 0; j < alpha.cols(); ++j)
      out.at(i, j) = alpha.at(i, j) * (d_alpha.at(i, j) - dot);
  }
  return out;
}

// Shared per-head chain: d_out of the block -> d_q, d_keys, d_vals (full
// width), plus w_o/b_o gradients.
void heads_backward(const AttentionConfig& cfg, const AttnTape& t, const Matrix& d_out,
                    const Matrix& w_o, Matrix* gw_o, Matrix* gb_o, Matrix& d_q, Matrix& d_keys,
                    Matrix& d_vals) {
  const int64_t dh = cfg.d_head();
  Matrix d_ctx = matmul_nt(d_out, w_o);
  if (gw_o) {
    add_into(*gw_o, matmul_tn(t.ctx, d_out));
    add_into(*gb_o, colsum(d_out));
  }
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    Matrix qh = col_slice(t.q, h * dh, dh);
    Matrix kh = col_slice(t.k, h * dh, dh);
    Matrix vh = col_slice(t.v, h * dh, dh);
    Matrix d_ctx_h = col_slice(d_ctx, h * dh, dh);
    const Matrix& alpha = t.alpha[static_cast<size_t>(h)];
    Matrix d_alpha = matmul_nt(d_ctx_h, vh);
    Matrix d_vh = matmul_tn(alpha, d_ctx_h);
    Matrix d_scores = softmax_backward(alpha, d_alpha);
    linalg::scale_inplace(d_scores, cfg.scale());
    Matrix d_qh = matmul(d_scores, kh);
    Matrix d_kh = matmul_tn(d_scores, qh);
    for (int64_t i = 0; i < d_qh.rows(); ++i)
      for (int64_t j = 0; j < dh; ++j) d_q.at(i, h * dh + j) += d_qh.at(i, j);
    for (int64_t i = 0; i < d_kh.rows(); ++i)
      for (int64_t j = 0; j < dh; ++j) {
        d_keys.at(i, h * dh + j) += d_kh.at(i, j);
        d_vals.at(i, h * dh + j) += d_vh.at(i, j);
      }
  }
}

// Backward through one attention block (LN -> attend). d_y is the gradient of
// the block output; d_x accumulates the gradient of the block input (may alias
// d_y), d_kv_ext (cross-attention only) accumulates the gradient of the
// external key/value stream.
void attn_block_backward(const AttnWeights& w, const AttentionConfig& cfg,
                         const AttnBlockTape& t, const LayerNormParams& ln, bool self_kv,
                         const Matrix& x_kv, const Matrix& d_y, AttnWeights* gw,
                         LayerNormParams* gln, Matrix& d_x, Matrix* d_kv_ext) {
  const int64_t s = t.ln_out.rows();
  const int64_t tk = t.attn.k.rows();
  Matrix d_q(s, cfg.d_model), d_keys(tk, cfg.d_model), d_vals(tk, cfg.d_model);
  Matrix d_ln_out(s, cfg.d_model);

  if (const auto* mha = std::get_if<MhaLayerWeights>(&w)) {
    auto* g = gw ? std::get_if<MhaLayerWeights>(gw) : nullptr;
    heads_backward(cfg, t.attn, d_y, mha->w_o, g ? &g->w_o : nullptr, g ? &g->b_o : nullptr, d_q,
                   d_keys, d_vals);
    if (g) {
      add_into(g->w_q, matmul_tn(t.ln_out, d_q));
      add_into(g->b_q, colsum(d_q));
      add_into(g->w_k, matmul_tn(x_kv, d_keys));
      add_into(g->w_v, matmul_tn(x_kv, d_vals));
      add_into(g->b_v, colsum(d_vals));
    }
    add_into(d_ln_out, matmul_nt(d_q, mha->w_q));
    Matrix d_xkv = matmul_nt(d_keys, mha->w_k);
    add_into(d_xkv, matmul_nt(d_vals, mha->w_v));
    if (self_kv) add_into(d_ln_out, d_xkv);
    else if (d_kv_ext) add_into(*d_kv_ext, d_xkv);
  } else {
    const auto& mla = std::get<MlaLayerWeights>(w);
    auto* g = gw ? std::get_if<MlaLayerWeights>(gw) : nullptr;
    heads_backward(cfg, t.attn, d_y, mla.w_o, g ? &g->w_o : nullptr, g ? &g->b_o : nullptr, d_q,
                   d_keys, d_vals);
    // split the full-key gradient back into preserved and compressed parts
    Matrix d_kp = gather_cols(d_keys, mla.preserved_dims);
    Matrix d_kc = gather_cols(d_keys, mla.compressed_dims);
    Matrix d_c = matmul_nt(d_kc, mla.w_uk);
    add_into(d_c, matmul_nt(d_vals, mla.w_uv));
    if (g) {
      add_into(g->w_q, matmul_tn(t.ln_out, d_q));
      add_into(g->b_q, colsum(d_q));
      add_into(g->w_uk, matmul_tn(t.attn.c_kv, d_kc));
      add_into(g->w_uv, matmul_tn(t.attn.c_kv, d_vals));
      add_into(g->b_v, colsum(d_vals));
      add_into(g->w_kp, matmul_tn(x_kv, d_kp));
      add_into(g->w_dkv, matmul_tn(x_kv, d_c));
    }
    add_into(d_ln_out, matmul_nt(d_q, mla.w_q));
    Matrix d_xkv = matmul_nt(d_c, mla.w_dkv);
    if (d_kp.cols() > 0) add_into(d_xkv, matmul_nt(d_kp, mla.w_kp));
    if (self_kv) add_into(d_ln_out, d_xkv);
    else if (d_kv_ext) add_into(*d_kv_ext, d_xkv);
  }
  ln_backward(t.ln, ln, d_ln_out, gln, d_x);
}

struct LossGrad {
  double nll = 0.0;
  int64_t positions = 0;
  int64_t correct = 0;
  Matrix d_logits;
};

// Stable log-softmax cross-entropy over non-pad target rows; gradient rows are
// scaled by inv_total so batch gradients sum to the mean loss gradient.
LossGrad loss_and_grad(const Matrix& logits, const std::vector<int>& target, double inv_total,
                       bool want_grad) {
  LossGrad out;
  if (want_grad) out.d_logits = Matrix(logits.rows(), logits.cols());
  const int64_t v = logits.cols();
  for (int64_t i = 0; i < logits.rows(); ++i) {
    const int tgt = target[static_cast<size_t>(i)];
    if (tgt == kPadToken) continue;
    const double* row = logits.row(i);
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    int64_t arg = 0;
    for (int64_t j = 0; j < v; ++j) {
      sum += std::exp(row[j] - mx);
      if (row[j] > row[arg]) arg = j;
    }
    const double lse = mx + std::log(sum);
    out.nll += lse - row[tgt];
    out.positions += 1;
    if (arg == tgt) out.correct += 1;
    if (want_grad) {
      for (int64_t j = 0; j < v; ++j)
        out.d_logits.at(i, j) = std::exp(row[j] - lse) * inv_total;
      out.d_logits.at(i, tgt) -= inv_total;
    }
  }
  return out;
}

int64_t count_positions(const std::vector<Example>& batch) {
  int64_t n = 0;
  for (const Example& e : batch)
    for (int t : e.target)
      if (t != kPadToken) ++n;
  return n;
}

// Full backward for one example, accumulating into g.
LossGrad backward_example(const Model& m, const Example& e, double inv_total,
                          const FreezeSet& freeze, Model& g) {
  ForwardTape tape;
  Matrix logits = forward_logits(m, e.source, decoder_input(e), &tape);
  LossGrad lg = loss_and_grad(logits, e.target, inv_total, /*want_grad=*/true);

  // output projection
  add_into(g.w_out, matmul_tn(tape.dec_final, lg.d_logits));
  add_into(g.b_out, colsum(lg.d_logits));
  Matrix d_x = matmul_nt(lg.d_logits, m.w_out);

  Matrix d_stream(d_x.rows(), d_x.cols());
  ln_backward(tape.dec_ln_f, m.dec_ln_f, d_x, &g.dec_ln_f, d_stream);

  const bool want_enc = !freeze.encoder;
  Matrix d_enc_states(tape.enc_states.rows(), tape.enc_states.cols());

  for (int64_t l = static_cast<int64_t>(m.dec_layers.size()) - 1; l >= 0; --l) {
    const DecoderLayer& layer = m.dec_layers[static_cast<size_t>(l)];
    DecoderLayer& gl = g.dec_layers[static_cast<size_t>(l)];
    const DecLayerTape& t = tape.dec[static_cast<size_t>(l)];
    ffn_backward(layer.ffn, layer.ffn_ln, t.ffn, d_stream, &gl.ffn, &gl.ffn_ln, d_stream);
    const bool train_cross = !freeze.cross_attention;
    attn_block_backward(layer.cross_attn, m.spec.cross, t.cross, layer.cross_ln,
                        /*self_kv=*/false, tape.enc_states, d_stream,
                        train_cross ? &gl.cross_attn : nullptr,
                        train_cross ? &gl.cross_ln : nullptr, d_stream,
                        want_enc ? &d_enc_states : nullptr);
    attn_block_backward(layer.self_attn, m.spec.decoder_self, t.self, layer.self_ln,
                        /*self_kv=*/true, t.self.ln_out, d_stream, &gl.self_attn, &gl.self_ln,
                        d_stream, nullptr);
  }
  // decoder embeddings
  for (int64_t i = 0; i < d_stream.rows(); ++i) {
    const int tok = tape.dec_in[static_cast<size_t>(i)];
    for (int64_t j = 0; j < d_stream.cols(); ++j) {
      g.dec_tok_emb.at(tok, j) += d_stream.at(i, j);
      g.dec_pos_emb.at(i, j) += d_stream.at(i, j);
    }
  }

  if (!want_enc) return lg;

  Matrix d_enc(d_enc_states.rows(), d_enc_states.cols());
  ln_backward(tape.enc_ln_f, m.enc_ln_f, d_enc_states, &g.enc_ln_f, d_enc);
  for (int64_t l = static_cast<int64_t>(m.enc_layers.size()) - 1; l >= 0; --l) {
    const EncoderLayer& layer = m.enc_layers[static_cast<size_t>(l)];
    EncoderLayer& gl = g.enc_layers[static_cast<size_t>(l)];
    const EncLayerTape& t = tape.enc[static_cast<size_t>(l)];
    ffn_backward(layer.ffn, layer.ffn_ln, t.ffn, d_enc, &gl.ffn, &gl.ffn_ln, d_enc);
    attn_block_backward(layer.attn, m.spec.encoder_self, t.attn, layer.attn_ln,
                        /*self_kv=*/true, t.attn.ln_out, d_enc, &gl.attn, &gl.attn_ln, d_enc,
                        nullptr);
  }
  for (int64_t i = 0; i < d_enc.rows(); ++i) {
    const int tok = tape.source[static_cast<size_t>(i)];
    for (int64_t j = 0; j < d_enc.cols(); ++j) g.enc_tok_emb.at(tok, j) += d_enc.at(i, j);
  }
  // sinusoidal positions carry no parameters
  return lg;
}

void zero_frozen(Model& g, const FreezeSet& freeze) {
  g.visit_tensors([&freeze](const std::string& name, Matrix& t) {
    if (freeze.frozen(name)) t.fill(0.0);
  });
}

}  // namespace

double forward_loss(const Model& m, const std::vector<Example>& batch) {
  if (batch.empty()) throw ArgumentError("forward_loss: empty batch");
  const int64_t total = count_positions(batch);
  if (total == 0) throw ArgumentError("forward_loss: batch has no non-pad target positions");
  double nll = 0.0;
  for (const Example& e : batch) {
    Matrix logits = forward_logits(m, e.source, decoder_input(e));
    nll += loss_and_grad(logits, e.target, 0.0, /*want_grad=*/false).nll;
  }
  return nll / static_cast<double>(total);
}

Model backward(const Model& m, const std::vector<Example>& batch, const FreezeSet& freeze,
               BatchStats* stats) {
  if (batch.empty()) throw ArgumentError("backward: empty batch");
  const int64_t total = count_positions(batch);
  if (total == 0) throw ArgumentError("backward: batch has no non-pad target positions");
  const double inv_total = 1.0 / static_cast<double>(total);

  Model g = m.zeros_clone();
  const int64_t n = static_cast<int64_t>(batch.size());
  std::vector<double> nlls(static_cast<size_t>(n), 0.0);
  std::vector<int64_t> corrects(static_cast<size_t>(n), 0);

#ifdef _OPENMP
  const bool parallel = n > 1 && omp_in_parallel() == 0;
#else
  const bool parallel = false;
#endif
  if (parallel) {
    // per-example gradient stores merged in example order: same bit pattern
    // as the serial path regardless of thread count
    std::vector<Model> stores;
    stores.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) stores.push_back(m.zeros_clone());
    std::exception_ptr pending = nullptr;
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < n; ++i) {
      try {
        LossGrad lg = backward_example(m, batch[static_cast<size_t>(i)], inv_total, freeze,
                                       stores[static_cast<size_t>(i)]);
        nlls[static_cast<size_t>(i)] = lg.nll;
        corrects[static_cast<size_t>(i)] = lg.correct;
      } catch (...) {
#pragma omp critical
        if (!pending) pending = std::current_exception();
      }
    }
    if (pending) std::rethrow_exception(pending);
    std::vector<Matrix*> dst;
    g.visit_tensors([&dst](const std::string&, Matrix& t) { dst.push_back(&t); });
    for (int64_t i = 0; i < n; ++i) {
      std::vector<Matrix*> src;
      stores[static_cast<size_t>(i)].visit_tensors(
          [&src](const std::string&, Matrix& t) { src.push_back(&t); });
      for (size_t j = 0; j < dst.size(); ++j) linalg::axpy_inplace(*dst[j], *src[j]);
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      LossGrad lg = backward_example(m, batch[static_cast<size_t>(i)], inv_total, freeze, g);
      nlls[static_cast<size_t>(i)] = lg.nll;
      corrects[static_cast<size_t>(i)] = lg.correct;
    }
  }

  zero_frozen(g, freeze);
  if (stats) {
    double nll = 0.0;
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i) {
      nll += nlls[static_cast<size_t>(i)];
      correct += corrects[static_cast<size_t>(i)];
    }
    stats->loss = nll * inv_total;
    stats->positions = total;
    stats->token_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  }
  return g;
}

FdReport finite_diff_check(const Model& m, const std::vector<Example>& batch,
                           int64_t sample_count, uint64_t seed) {
  if (sample_count < 1) throw ArgumentError("finite_diff_check: sample_count must be >= 1");
  Model grads = backward(m, batch);

  struct Entry {
    std::string name;
    int64_t numel;
  };
  std::vector<Entry> entries;
  int64_t total = 0;
  m.visit_tensors([&](const std::string& name, const Matrix& t) {
    entries.push_back({name, t.size()});
    total += t.size();
  });

  const double h = 1e-5;
  Rng rng(seed);
  FdReport report;
  std::map<std::string, double> per_tensor;
  for (int64_t s = 0; s < sample_count; ++s) {
    int64_t flat = rng.uniform_int(0, total);
    size_t which = 0;
    while (flat >= entries[which].numel) {
      flat -= entries[which].numel;
      ++which;
    }
    const std::string& name = entries[which].name;

    double analytic = 0.0;
    grads.visit_tensors([&](const std::string& n, Matrix& t) {
      if (n == name) analytic = t.data()[static_cast<size_t>(flat)];
    });

    auto eval_at = [&](double delta) {
      Model probe = m;
      probe.visit_tensors([&](const std::string& n, Matrix& t) {
        if (n == name) t.data()[static_cast<size_t>(flat)] += delta;
      });
      return forward_loss(probe, batch);
    };
    const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
    const double rel = std::fabs(analytic - numeric) / denom;

    report.coords.push_back({name, flat, analytic, numeric, rel});
    per_tensor[name] = std::max(per_tensor[name], rel);
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  report.per_tensor_max.assign(per_tensor.begin(), per_tensor.end());
  return report;
}

namespace {

struct ParamRefs {
  std::vector<std::string> names;
  std::vector<Matrix*> tensors;
};

ParamRefs collect(Model& m) {
  ParamRefs r;
  m.visit_tensors([&r](const std::string& name, Matrix& t) {
    r.names.push_back(name);
    r.tensors.push_back(&t);
  });
  return r;
}

}  // namespace

FinetuneResult finetune(Model model, const SyntheticTask& task, const TrainConfig& cfg,
                        const FreezeSet& freeze) {
  if (cfg.epochs < 1) throw ArgumentError("finetune: epochs must be >= 1");
  if (cfg.learning_rate <= 0.0) throw ArgumentError("finetune: learning_rate must be > 0");
  if (cfg.batch_size < 1) throw ArgumentError("finetune: batch_size must be >= 1");
  if (task.vocab_size > model.spec.vocab_size)
    throw ArgumentError("finetune: task vocabulary exceeds the model's");
  if (task.max_len + 1 > model.spec.max_target_len || task.max_len > model.spec.max_source_len)
    throw ArgumentError("finetune: task sequences do not fit the model's length limits");

  DatasetSplit split = split_dataset(generate_dataset(task));

  Model m_state = model.zeros_clone();
  Model v_state = model.zeros_clone();
  ParamRefs params = collect(model);
  ParamRefs m_refs = collect(m_state);
  ParamRefs v_refs = collect(v_state);
  int64_t step = 0;

  Rng order_rng(cfg.seed);
  std::vector<size_t> order(split.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  FinetuneResult result;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with the run's own rng; std::shuffle is not pinned across
    // standard libraries
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(order_rng.uniform_int(0, static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_nll = 0.0;
    int64_t epoch_positions = 0;
    double epoch_correct = 0.0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      std::vector<Example> batch;
      batch.reserve(end - begin);
      for (size_t i = begin; i < end; ++i) batch.push_back(split.train[order[i]]);

      BatchStats stats;
      Model g = [&] {
        try {
          return backward(model, batch, freeze, &stats);
        } catch (const ArgumentError& e) {
          // non-finite activations surface as precondition failures downstream
          std::ostringstream os;
          os << "finetune: training diverged at epoch " << epoch << ", step " << step << " ("
             << e.what() << ")";
          throw NumericalError(os.str());
        }
      }();
      if (!std::isfinite(stats.loss)) {
        std::ostringstream os;
        os << "finetune: training diverged (non-finite loss) at epoch " << epoch << ", step "
           << step;
        throw NumericalError(os.str());
      }
      epoch_nll += stats.loss * static_cast<double>(stats.positions);
      epoch_positions += stats.positions;
      epoch_correct += stats.token_accuracy * static_cast<double>(stats.positions);

      ParamRefs g_refs = collect(g);
      if (cfg.gradient_clip > 0.0) {
        double sq = 0.0;
        for (Matrix* t : g_refs.tensors)
          for (double v : t->data()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg.gradient_clip)
          for (Matrix* t : g_refs.tensors) linalg::scale_inplace(*t, cfg.gradient_clip / norm);
      }

      ++step;
      if (cfg.optimizer == TrainConfig::Optimizer::sgd) {
        for (size_t i = 0; i < params.tensors.size(); ++i) {
          if (freeze.frozen(params.names[i])) continue;
          linalg::axpy_inplace(*params.tensors[i], *g_refs.tensors[i], -cfg.learning_rate);
        }
      } else {
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (size_t i = 0; i < params.tensors.size(); ++i) {
          if (freeze.frozen(params.names[i])) continue;
          auto& th = params.tensors[i]->data();
          auto& gd = g_refs.tensors[i]->data();
          auto& mm = m_refs.tensors[i]->data();
          auto& vv = v_refs.tensors[i]->data();
          for (size_t k = 0; k < th.size(); ++k) {
            mm[k] = cfg.beta1 * mm[k] + (1.0 - cfg.beta1) * gd[k];
            vv[k] = cfg.beta2 * vv[k] + (1.0 - cfg.beta2) * gd[k] * gd[k];
            const double mhat = mm[k] / bc1;
            const double vhat = vv[k] / bc2;
            th[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
          }
        }
      }
    }

    EpochMetric train_row{epoch, "train", epoch_nll / static_cast<double>(epoch_positions),
                          epoch_correct / static_cast<double>(epoch_positions)};
    EvalMetrics held = evaluate(model, split.heldout);
    result.trace.push_back(train_row);
    result.trace.push_back({epoch, "heldout", held.loss, held.token_accuracy});
  }
  result.model = std::move(model);
  return result;
}

EvalMetrics evaluate(const Model& m, const std::vector<Example>& examples) {
  if (examples.empty()) throw ArgumentError("evaluate: empty example set");
  double nll = 0.0;
  int64_t positions = 0, correct = 0;
  for (const Example& e : examples) {
    Matrix logits = forward_logits(m, e.source, decoder_input(e));
    LossGrad lg = loss_and_grad(logits, e.target, 0.0, /*want_grad=*/false);
    nll += lg.nll;
    positions += lg.positions;
    correct += lg.correct;
  }
  if (positions == 0) throw ArgumentError("evaluate: no non-pad target positions");
  EvalMetrics out;
  out.loss = nll / static_cast<double>(positions);
  out.token_accuracy = static_cast<double>(correct) / static_cast<double>(positions);
  return out;
}

}  // namespace wmla
