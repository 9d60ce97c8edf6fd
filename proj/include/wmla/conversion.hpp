#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmla/attention.hpp"
#include "wmla/model.hpp"

namespace wmla {

enum class Strategy { full_compression, uniform, two_norm };
enum class Placement { full, dso };

const char* to_string(Strategy s);
const char* to_string(Placement p);
Strategy strategy_from_string(const std::string& s);
Placement placement_from_string(const std::string& s);

struct ConversionSpec {
  Strategy strategy = Strategy::uniform;
  int64_t d_latent = 8;
  int64_t r_per_head = 1;  // must be 0 for full_compression
  Placement placement = Placement::dso;
  std::string baseline_checkpoint;  // informational reference
  std::string calibration_ref;      // required iff strategy == two_norm
  uint64_t seed = 0;

  void validate(const ModelSpec& model) const;  // throws ConfigError
  nlohmann::ordered_json to_json() const;
};

// Column partition of the key projection: w_kp collects the preserved global
// dimension columns (ascending), w_kc the ascending complement.
struct KeySplit {
  Matrix w_kp;
  Matrix w_kc;
};
KeySplit split_key_projection(const Matrix& w_k, const SubspaceSelection& sel);

// Joint SVD of [w_kc | w_v] truncated to d_latent, split per the sqrt-Sigma
// convention: w_dkv = U*sqrt(S), w_uk = sqrt(S)*V^T (first w_kc columns),
// w_uv = sqrt(S)*V^T (remaining columns).
struct JointFactors {
  Matrix w_dkv;
  Matrix w_uk;
  Matrix w_uv;
  double frobenius_error = 0.0;  // || [w_kc|w_v] - w_dkv*[w_uk|w_uv] ||_F
  double relative_error = 0.0;
};
JointFactors joint_svd_factorize(const Matrix& w_kc, const Matrix& w_v, int64_t d_latent);

// Query/output projections and all non-key biases are copied verbatim; the
// key projection is split per the selection and the compressible part is
// jointly factorized with the value projection.
MlaLayerWeights convert_layer(const MhaLayerWeights& w, const AttentionConfig& mla_cfg,
                              const SubspaceSelection& sel, double* frob_err = nullptr,
                              double* rel_err = nullptr);

struct LayerConversionReport {
  std::string site_layer;  // e.g. "dec.layers.0.self"
  double frobenius_error = 0.0;
  double relative_error = 0.0;
};

struct ConversionResult {
  Model model;
  std::vector<LayerConversionReport> report;
};

// Converts exactly the sites dictated by the placement policy; everything
// else is copied bit-exactly. The output model records the conversion spec
// and per-layer selections for checkpoint self-description. Deterministic
// given (model, spec, calibration, seed).
ConversionResult convert_model(const Model& baseline, const ConversionSpec& spec,
                               const std::vector<Example>* calibration = nullptr);

}  // namespace wmla
