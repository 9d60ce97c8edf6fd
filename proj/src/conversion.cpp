#include "wmla/conversion.hpp"

#include <cmath>

#include "wmla/errors.hpp"
#include "wmla/selection.hpp"

namespace wmla {

using linalg::frobenius_norm;
using linalg::matmul;
using linalg::truncated_svd;

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::full_compression: return "full_compression";
    case Strategy::uniform: return "uniform";
    case Strategy::two_norm: return "two_norm";
  }
  return "?";
}

const char* to_string(Placement p) { return p == Placement::full ? "full" : "dso"; }

Strategy strategy_from_string(const std::string& s) {
  if (s == "full_compression" || s == "full-compression") return Strategy::full_compression;
  if (s == "uniform") return Strategy::uniform;
  if (s == "two_norm" || s == "2norm") return Strategy::two_norm;
  throw ArgumentError("unknown strategy: " + s);
}

Placement placement_from_string(const std::string& s) {
  if (s == "full") return Placement::full;
  if (s == "dso") return Placement::dso;
  throw ArgumentError("unknown placement: " + s);
}

void ConversionSpec::validate(const ModelSpec& model) const {
  if (strategy == Strategy::full_compression && r_per_head != 0)
    throw ConfigError("ConversionSpec: full_compression requires r_per_head = 0");
  if (strategy != Strategy::full_compression &&
      (r_per_head < 1 || r_per_head > model.d_model / model.n_heads / 2))
    throw ConfigError("ConversionSpec: r_per_head out of range");
  const int64_t n_preserved = 2 * r_per_head * model.n_heads;
  const int64_t concat_width = (model.d_model - n_preserved) + model.d_model;
  if (d_latent < 1 || d_latent > std::min(model.d_model, concat_width))
    throw ConfigError("ConversionSpec: d_latent exceeds the factorizable rank");
}

nlohmann::ordered_json ConversionSpec::to_json() const {
  nlohmann::ordered_json j;
  j["strategy"] = to_string(strategy);
  j["placement"] = to_string(placement);
  j["d_latent"] = d_latent;
  j["r_per_head"] = r_per_head;
  j["baseline_checkpoint"] = baseline_checkpoint;
  j["calibration"] = calibration_ref;
  j["seed"] = seed;
  return j;
}

KeySplit split_key_projection(const Matrix& w_k, const SubspaceSelection& sel) {
  sel.validate();
  if (w_k.rows() != w_k.cols() || w_k.cols() != sel.n_heads * sel.d_head)
    throw ArgumentError("split_key_projection: w_k inconsistent with selection geometry");
  KeySplit out;
  out.w_kp = linalg::gather_cols(w_k, sel.global_preserved_dims());
  out.w_kc = linalg::gather_cols(w_k, sel.global_compressed_dims());
  return out;
}

JointFactors joint_svd_factorize(const Matrix& w_kc, const Matrix& w_v, int64_t d_latent) {
  if (w_kc.rows() != w_v.rows())
    throw ArgumentError("joint_svd_factorize: w_kc and w_v must share the row count");
  const int64_t d = w_v.rows();
  const int64_t width = w_kc.cols() + w_v.cols();
  if (d_latent < 1 || d_latent > std::min(d, width))
    throw ArgumentError("joint_svd_factorize: d_latent out of range");

  Matrix concat(d, width);
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t j = 0; j < w_kc.cols(); ++j) concat.at(i, j) = w_kc.at(i, j);
    for (int64_t j = 0; j < w_v.cols(); ++j) concat.at(i, w_kc.cols() + j) = w_v.at(i, j);
  }
  linalg::SvdFactors f = truncated_svd(concat, d_latent);

  JointFactors out;
  out.w_dkv = Matrix(d, d_latent);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d_latent; ++j)
      out.w_dkv.at(i, j) = f.u.at(i, j) * std::sqrt(f.s[static_cast<size_t>(j)]);
  // sqrt(Sigma) * V^T, split at the concatenation boundary
  out.w_uk = Matrix(d_latent, w_kc.cols());
  out.w_uv = Matrix(d_latent, w_v.cols());
  for (int64_t i = 0; i < d_latent; ++i) {
    const double rs = std::sqrt(f.s[static_cast<size_t>(i)]);
    for (int64_t j = 0; j < w_kc.cols(); ++j) out.w_uk.at(i, j) = rs * f.v.at(j, i);
    for (int64_t j = 0; j < w_v.cols(); ++j) out.w_uv.at(i, j) = rs * f.v.at(w_kc.cols() + j, i);
  }

  Matrix recon_k = matmul(out.w_dkv, out.w_uk);
  Matrix recon_v = matmul(out.w_dkv, out.w_uv);
  double err_sq = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t j = 0; j < w_kc.cols(); ++j) {
      const double e = recon_k.at(i, j) - w_kc.at(i, j);
      err_sq += e * e;
    }
    for (int64_t j = 0; j < w_v.cols(); ++j) {
      const double e = recon_v.at(i, j) - w_v.at(i, j);
      err_sq += e * e;
    }
  }
  out.frobenius_error = std::sqrt(err_sq);
  const double base = frobenius_norm(concat);
  out.relative_error = base > 0.0 ? out.frobenius_error / base : 0.0;
  return out;
}

MlaLayerWeights convert_layer(const MhaLayerWeights& w, const AttentionConfig& mla_cfg,
                              const SubspaceSelection& sel, double* frob_err, double* rel_err) {
  mla_cfg.validate();
  if (!mla_cfg.is_mla()) throw ConfigError("convert_layer: target config is not an MLA variant");
  KeySplit split = split_key_projection(w.w_k, sel);
  JointFactors jf = joint_svd_factorize(split.w_kc, w.w_v, mla_cfg.d_latent);

  MlaLayerWeights out;
  out.w_q = w.w_q;
  out.b_q = w.b_q;
  out.w_kp = std::move(split.w_kp);
  out.w_dkv = std::move(jf.w_dkv);
  out.w_uk = std::move(jf.w_uk);
  out.w_uv = std::move(jf.w_uv);
  out.b_v = w.b_v;  // not factorized, applied after up-projection
  out.w_o = w.w_o;
  out.b_o = w.b_o;
  out.selection = sel;
  out.finalize(mla_cfg);
  if (frob_err) *frob_err = jf.frobenius_error;
  if (rel_err) *rel_err = jf.relative_error;
  return out;
}

namespace {

std::vector<Site> converted_sites(Placement p) {
  if (p == Placement::full) return {Site::encoder_self, Site::decoder_self, Site::cross};
  return {Site::decoder_self};
}

}  // namespace

ConversionResult convert_model(const Model& baseline, const ConversionSpec& spec,
                               const std::vector<Example>* calibration) {
  baseline.spec.validate();
  spec.validate(baseline.spec);
  for (Site s : {Site::encoder_self, Site::decoder_self, Site::cross})
    if (baseline.spec.site(s).variant != AttentionVariant::mha)
      throw ConfigError("convert_model: baseline must be an all-MHA model");
  if (spec.strategy == Strategy::two_norm && (!calibration || calibration->empty()))
    throw ConfigError("convert_model: calibration required for the two_norm strategy");

  ConversionResult result;
  result.model = baseline;  // untouched layers stay bit-identical
  Model& out = result.model;

  const AttentionVariant variant = spec.strategy == Strategy::full_compression
                                       ? AttentionVariant::mla_full
                                       : AttentionVariant::mla_preserving;
  for (Site site : converted_sites(spec.placement)) {
    AttentionConfig& cfg = out.spec.site(site);
    cfg.variant = variant;
    cfg.d_latent = spec.d_latent;
    cfg.r_per_head = spec.r_per_head;
    cfg.validate();

    // statistics come from the original model, before any site is converted
    std::vector<NormStatistics> stats;
    if (spec.strategy == Strategy::two_norm)
      stats = collect_norm_statistics(baseline, *calibration, site);

    const int64_t n_layers =
        site == Site::encoder_self ? out.spec.n_encoder_layers : out.spec.n_decoder_layers;
    for (int64_t l = 0; l < n_layers; ++l) {
      SubspaceSelection sel;
      switch (spec.strategy) {
        case Strategy::full_compression:
          sel = full_compression_selection(cfg.n_heads, cfg.d_head());
          break;
        case Strategy::uniform:
          sel = uniform_selection(cfg.n_heads, cfg.d_head(), spec.r_per_head);
          break;
        case Strategy::two_norm:
          sel = select_2norm(stats[static_cast<size_t>(l)], spec.r_per_head);
          break;
      }

      AttnWeights* slot = nullptr;
      std::string name;
      if (site == Site::encoder_self) {
        slot = &out.enc_layers[static_cast<size_t>(l)].attn;
        name = "enc.layers." + std::to_string(l) + ".attn";
      } else if (site == Site::decoder_self) {
        slot = &out.dec_layers[static_cast<size_t>(l)].self_attn;
        name = "dec.layers." + std::to_string(l) + ".self";
      } else {
        slot = &out.dec_layers[static_cast<size_t>(l)].cross_attn;
        name = "dec.layers." + std::to_string(l) + ".cross";
      }
      const auto& mha = std::get<MhaLayerWeights>(*slot);
      double frob = 0.0, rel = 0.0;
      *slot = convert_layer(mha, cfg, sel, &frob, &rel);
      result.report.push_back({name, frob, rel});
    }
  }
  out.conversion_record = spec.to_json();
  return result;
}

}  // namespace wmla
