#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wmla/conversion.hpp"
#include "wmla/errors.hpp"
#include "wmla/training.hpp"

using namespace wmla;
using linalg::matmul;
using linalg::max_abs_diff;
using testutil::random_matrix;
using testutil::random_tokens;

namespace {

MhaLayerWeights random_mha_weights(uint64_t seed, int64_t d) {
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  MhaLayerWeights w;
  w.w_q = rng.normal_matrix(d, d, s);
  w.w_k = rng.normal_matrix(d, d, s);
  w.w_v = rng.normal_matrix(d, d, s);
  w.w_o = rng.normal_matrix(d, d, s);
  w.b_q = rng.normal_matrix(1, d, 0.1);
  w.b_v = rng.normal_matrix(1, d, 0.1);
  w.b_o = rng.normal_matrix(1, d, 0.1);
  return w;
}

// Rewrites every attention site's w_k/w_v as A*B with a shared left factor,
// so [w_kc | w_v] has rank <= inner regardless of the selection.
void make_low_rank_attention(Model& m, int64_t inner, uint64_t seed) {
  Rng rng(seed);
  auto rewrite = [&](AttnWeights& w) {
    auto& mha = std::get<MhaLayerWeights>(w);
    const int64_t d = mha.w_k.rows();
    Matrix a = rng.normal_matrix(d, inner, 1.0 / std::sqrt(static_cast<double>(inner)));
    mha.w_k = matmul(a, rng.normal_matrix(inner, d, 1.0 / std::sqrt(static_cast<double>(d))));
    mha.w_v = matmul(a, rng.normal_matrix(inner, d, 1.0 / std::sqrt(static_cast<double>(d))));
  };
  for (auto& layer : m.enc_layers) rewrite(layer.attn);
  for (auto& layer : m.dec_layers) {
    rewrite(layer.self_attn);
    rewrite(layer.cross_attn);
  }
}

}  // namespace

TEST_CASE("split_key_projection partitions columns by the selection") {
  Matrix w_k = random_matrix(3, 4, 4);
  SubspaceSelection all = uniform_selection(1, 4, 2);
  KeySplit keep_all = split_key_projection(w_k, all);
  CHECK(keep_all.w_kc.cols() == 0);
  CHECK(max_abs_diff(keep_all.w_kp, w_k) == 0.0);

  SubspaceSelection none = full_compression_selection(1, 4);
  KeySplit drop_all = split_key_projection(w_k, none);
  CHECK(drop_all.w_kp.cols() == 0);
  CHECK(max_abs_diff(drop_all.w_kc, w_k) == 0.0);

  SubspaceSelection first;  // subspace 0 -> dims {0,1}
  first.n_heads = 1;
  first.d_head = 4;
  first.per_head = {{0}};
  KeySplit half = split_key_projection(w_k, first);
  REQUIRE(half.w_kp.cols() == 2);
  REQUIRE(half.w_kc.cols() == 2);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(half.w_kp.at(i, 0) == w_k.at(i, 0));
    CHECK(half.w_kp.at(i, 1) == w_k.at(i, 1));
    CHECK(half.w_kc.at(i, 0) == w_k.at(i, 2));
    CHECK(half.w_kc.at(i, 1) == w_k.at(i, 3));
  }
}

TEST_CASE("column partition reassembles w_k exactly") {
  Matrix w_k = random_matrix(8, 16, 16);
  SubspaceSelection sel = uniform_selection(4, 4, 1);
  KeySplit split = split_key_projection(w_k, sel);
  Matrix rebuilt(16, 16);
  linalg::scatter_cols_into(rebuilt, split.w_kp, sel.global_preserved_dims());
  linalg::scatter_cols_into(rebuilt, split.w_kc, sel.global_compressed_dims());
  CHECK(max_abs_diff(rebuilt, w_k) == 0.0);
}

TEST_CASE("joint_svd_factorize: zero keys and identity values") {
  const int64_t d = 6;
  Matrix w_kc(d, 3);
  Matrix w_v = Matrix::identity(d);
  JointFactors f = joint_svd_factorize(w_kc, w_v, d);
  CHECK(max_abs_diff(matmul(f.w_dkv, f.w_uv), w_v) < 1e-10);
  CHECK(linalg::max_abs(matmul(f.w_dkv, f.w_uk)) < 1e-10);
}

TEST_CASE("joint_svd_factorize: full rank is an exact reparameterization") {
  const int64_t d = 10;
  Matrix w_kc = random_matrix(61, d, 4);
  Matrix w_v = random_matrix(62, d, 5);
  JointFactors f = joint_svd_factorize(w_kc, w_v, 9);  // width 9 <= d
  CHECK(f.relative_error < 1e-9);
  CHECK(max_abs_diff(matmul(f.w_dkv, f.w_uk), w_kc) < 1e-9);
  CHECK(max_abs_diff(matmul(f.w_dkv, f.w_uv), w_v) < 1e-9);
}

TEST_CASE("joint_svd_factorize truncation error matches the Eckart-Young oracle") {
  Matrix w_kc = random_matrix(63, 8, 6);
  Matrix w_v = random_matrix(64, 8, 8);
  Matrix concat(8, 14);
  for (int64_t i = 0; i < 8; ++i) {
    for (int64_t j = 0; j < 6; ++j) concat.at(i, j) = w_kc.at(i, j);
    for (int64_t j = 0; j < 8; ++j) concat.at(i, 6 + j) = w_v.at(i, j);
  }
  JointFactors f = joint_svd_factorize(w_kc, w_v, 4);
  CHECK(std::fabs(f.frobenius_error - oracles::truncation_error(concat, 4)) < 1e-8);
  CHECK_THROWS_AS(joint_svd_factorize(w_kc, w_v, 9), ArgumentError);
}

TEST_CASE("convert_layer at full latent rank reproduces MHA attention") {
  const int64_t d = 16;
  AttentionConfig mcfg;
  mcfg.d_model = d;
  mcfg.n_heads = 4;
  MhaLayerWeights mha = random_mha_weights(71, d);
  AttentionConfig lcfg = mcfg;
  lcfg.variant = AttentionVariant::mla_preserving;
  lcfg.d_latent = d;  // concat rank is capped by d, so this is lossless
  lcfg.r_per_head = 1;
  double frob = 0.0;
  MlaLayerWeights mla =
      convert_layer(mha, lcfg, uniform_selection(4, 4, 1), &frob);
  CHECK(frob < 1e-9);
  Matrix x = random_matrix(72, 5, d);
  CHECK(max_abs_diff(mla_attend(x, x, mla, lcfg, true), mha_attend(x, x, mha, mcfg, true)) < 1e-8);
}

TEST_CASE("rank-1 key/value pair converts exactly at d_latent = 1") {
  const int64_t d = 8;
  MhaLayerWeights mha = random_mha_weights(73, d);
  Rng rng(74);
  Matrix u = rng.normal_matrix(d, 1, 1.0);
  mha.w_k = matmul(u, rng.normal_matrix(1, d, 1.0));
  mha.w_v = matmul(u, rng.normal_matrix(1, d, 1.0));
  AttentionConfig lcfg;
  lcfg.d_model = d;
  lcfg.n_heads = 2;
  lcfg.variant = AttentionVariant::mla_full;
  lcfg.d_latent = 1;
  double frob = 1.0;
  MlaLayerWeights mla = convert_layer(mha, lcfg, full_compression_selection(2, 4), &frob);
  CHECK(frob < 1e-10);
  AttentionConfig mcfg;
  mcfg.d_model = d;
  mcfg.n_heads = 2;
  Matrix x = random_matrix(75, 4, d);
  CHECK(max_abs_diff(mla_attend(x, x, mla, lcfg, true), mha_attend(x, x, mha, mcfg, true)) < 1e-8);
}

TEST_CASE("output deviation decreases monotonically with d_latent") {
  const int64_t d = 64;
  AttentionConfig mcfg;
  mcfg.d_model = d;
  mcfg.n_heads = 4;
  MhaLayerWeights mha = random_mha_weights(81, d);
  Matrix x = random_matrix(82, 12, d);
  Matrix ref = mha_attend(x, x, mha, mcfg, true);
  double prev = 1e300;
  for (int64_t d_latent : {4, 8, 16, 32}) {
    AttentionConfig lcfg = mcfg;
    lcfg.variant = AttentionVariant::mla_preserving;
    lcfg.d_latent = d_latent;
    lcfg.r_per_head = 1;
    MlaLayerWeights mla = convert_layer(mha, lcfg, uniform_selection(4, 16, 1));
    Matrix out = mla_attend(x, x, mla, lcfg, true);
    double mean_dev = 0.0;
    for (int64_t i = 0; i < out.size(); ++i)
      mean_dev += std::fabs(out.data()[static_cast<size_t>(i)] - ref.data()[static_cast<size_t>(i)]);
    mean_dev /= static_cast<double>(out.size());
    CHECK(mean_dev < prev + 1e-12);
    CHECK(std::isfinite(mean_dev));
    prev = mean_dev;
  }
}

TEST_CASE("convert_model with DSO placement leaves other sites byte-identical") {
  Model baseline = Model::random_init(ModelSpec::toy(), 90);
  ConversionSpec spec;
  spec.strategy = Strategy::uniform;
  spec.placement = Placement::dso;
  spec.d_latent = 8;
  spec.r_per_head = 1;
  ConversionResult res = convert_model(baseline, spec);

  CHECK(res.model.spec.decoder_self.variant == AttentionVariant::mla_preserving);
  CHECK(res.model.spec.encoder_self.variant == AttentionVariant::mha);
  CHECK(res.model.spec.cross.variant == AttentionVariant::mha);
  CHECK(res.report.size() == 2);  // one per decoder layer

  CheckpointContainer before = baseline.to_container();
  CheckpointContainer after = res.model.to_container();
  for (const TensorRecord& t : before.tensors) {
    if (t.name.find(".self") != std::string::npos) continue;
    const TensorRecord* other = after.find(t.name);
    REQUIRE(other != nullptr);
    CHECK(other->bytes == t.bytes);
  }
  // cache accounting: 2*d_model = 128 entries per token before, 16 after
  CHECK(baseline.spec.decoder_self.cache_entries_per_token() == 128);
  CHECK(res.model.spec.decoder_self.cache_entries_per_token() == 16);
}

TEST_CASE("conversion is deterministic down to the checkpoint bytes") {
  Model baseline = Model::random_init(ModelSpec::toy(), 91);
  ConversionSpec spec;
  spec.strategy = Strategy::uniform;
  spec.placement = Placement::full;
  spec.d_latent = 16;
  spec.r_per_head = 2;
  const auto a = convert_model(baseline, spec).model.to_container().serialize();
  const auto b = convert_model(baseline, spec).model.to_container().serialize();
  CHECK(a == b);
}

TEST_CASE("full-placement lossless conversion preserves logits and greedy decodes") {
  Model baseline = Model::random_init(ModelSpec::toy(), 92);
  make_low_rank_attention(baseline, 8, 920);
  ConversionSpec spec;
  spec.strategy = Strategy::uniform;
  spec.placement = Placement::full;
  spec.d_latent = 16;  // true rank of every [w_kc | w_v] is <= 8
  spec.r_per_head = 1;
  Model converted = convert_model(baseline, spec).model;

  for (uint64_t s = 0; s < 10; ++s) {
    const std::vector<int> src = random_tokens(1000 + s, 6 + static_cast<int64_t>(s % 4), 64);
    const std::vector<int> dec = random_tokens(2000 + s, 5, 64);
    CHECK(max_abs_diff(forward_logits(baseline, src, dec), forward_logits(converted, src, dec)) <
          1e-7);
    CHECK(greedy_decode(baseline, src, 20) == greedy_decode(converted, src, 20));
  }
}

TEST_CASE("two_norm strategy requires calibration data") {
  Model baseline = Model::random_init(ModelSpec::toy(), 93);
  ConversionSpec spec;
  spec.strategy = Strategy::two_norm;
  spec.placement = Placement::dso;
  spec.d_latent = 8;
  spec.r_per_head = 1;
  CHECK_THROWS_AS(convert_model(baseline, spec), ConfigError);
  std::vector<Example> empty;
  CHECK_THROWS_AS(convert_model(baseline, spec, &empty), ConfigError);

  SyntheticTask task;
  task.sample_count = 4;
  task.max_len = 5;
  const std::vector<Example> calib = generate_dataset(task);
  ConversionResult res = convert_model(baseline, spec, &calib);
  CHECK(res.model.spec.decoder_self.variant == AttentionVariant::mla_preserving);
  // per-layer, per-head selections are recorded in the checkpoint
  bool saw_selection = false;
  res.model.visit_selections([&](const std::string& name, const SubspaceSelection& sel) {
    saw_selection = true;
    CHECK(name.find(".self.selection") != std::string::npos);
    CHECK(sel.r_per_head() == 1);
  });
  CHECK(saw_selection);
}

TEST_CASE("convert_model refuses a non-MHA baseline") {
  Model baseline = Model::random_init(testutil::spec_with_variant(AttentionVariant::mla_full), 94);
  ConversionSpec spec;
  CHECK_THROWS_AS(convert_model(baseline, spec), ConfigError);
}
