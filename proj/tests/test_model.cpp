#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wmla/errors.hpp"
#include "wmla/model.hpp"

using namespace wmla;
using linalg::max_abs_diff;
using testutil::random_tokens;
using testutil::spec_with_variant;

TEST_CASE("layer norm rows have zero mean and unit variance under unit gamma") {
  LayerNormParams p;
  p.gamma = Matrix(1, 64);
  p.gamma.fill(1.0);
  p.beta = Matrix(1, 64);
  Matrix x = testutil::random_matrix(5, 20, 64, 1.7);
  Matrix y = layer_norm(x, p);
  for (int64_t i = 0; i < y.rows(); ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < 64; ++j) mu += y.at(i, j);
    mu /= 64.0;
    CHECK(std::fabs(mu) < 1e-9);
    double var = 0.0;
    for (int64_t j = 0; j < 64; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 64.0;
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("encode: shape, determinism, naive-oracle agreement") {
  Model m = Model::random_init(ModelSpec::toy(), 42);
  const std::vector<int> pad_only = {kPadToken};
  Matrix one = encode(m, pad_only);
  CHECK(one.rows() == 1);
  CHECK(one.cols() == 64);
  CHECK(linalg::all_finite(one));

  const std::vector<int> src = random_tokens(7, 9, 64);
  Matrix a = encode(m, src);
  Matrix b = encode(m, src);
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(max_abs_diff(a, oracles::naive_encode(m, src)) < 1e-10);
}

TEST_CASE("encode input validation") {
  Model m = Model::random_init(ModelSpec::toy(), 42);
  CHECK_THROWS_AS(encode(m, {}), ArgumentError);
  CHECK_THROWS_AS(encode(m, std::vector<int>(200, 5)), ArgumentError);
  CHECK_THROWS_AS(encode(m, {70}), ArgumentError);
}

TEST_CASE("full forward matches the naive oracle for MHA and MLA variants") {
  const std::vector<int> src = random_tokens(11, 8, 64);
  const std::vector<int> dec = random_tokens(12, 6, 64);
  for (AttentionVariant v :
       {AttentionVariant::mha, AttentionVariant::mla_full, AttentionVariant::mla_preserving}) {
    Model m = Model::random_init(spec_with_variant(v), 100 + static_cast<uint64_t>(v));
    Matrix logits = forward_logits(m, src, dec);
    Matrix want = oracles::naive_forward_logits(m, src, dec);
    CHECK(max_abs_diff(logits, want) < 1e-9);
  }
}

TEST_CASE("decode_step reproduces the batch causal pass for all variants") {
  const std::vector<int> src = random_tokens(21, 10, 64);
  std::vector<int> dec = {kBosToken};
  const std::vector<int> rest = random_tokens(22, 15, 64);
  dec.insert(dec.end(), rest.begin(), rest.end());

  for (AttentionVariant v :
       {AttentionVariant::mha, AttentionVariant::mla_full, AttentionVariant::mla_preserving}) {
    Model m = Model::random_init(spec_with_variant(v), 200 + static_cast<uint64_t>(v));
    Matrix batch = forward_logits(m, src, dec);
    Matrix enc_states = encode(m, src);
    DecoderCaches caches = DecoderCaches::make(m.spec);
    for (size_t t = 0; t < dec.size(); ++t) {
      Matrix step = decode_step(m, dec[t], static_cast<int64_t>(t), enc_states, caches);
      for (int64_t j = 0; j < batch.cols(); ++j)
        CHECK(step.at(0, j) == doctest::Approx(batch.at(static_cast<int64_t>(t), j)).epsilon(1e-9));
    }
  }
}

TEST_CASE("cross cache is static and the self cache grows linearly") {
  Model m = Model::random_init(spec_with_variant(AttentionVariant::mla_preserving), 303);
  const std::vector<int> src = random_tokens(31, 7, 64);
  Matrix enc_states = encode(m, src);
  DecoderCaches caches = DecoderCaches::make(m.spec);
  decode_step(m, kBosToken, 0, enc_states, caches);
  const int64_t cross_entries = caches.cross[0].entries();
  const int64_t per_token = m.spec.decoder_self.cache_entries_per_token();
  CHECK(per_token == m.spec.decoder_self.d_latent + m.spec.decoder_self.n_preserved());
  CHECK(caches.self[0].entries() == per_token);
  for (int64_t t = 1; t <= 5; ++t) {
    decode_step(m, 5, t, enc_states, caches);
    CHECK(caches.self[0].entries() == (t + 1) * per_token);
    CHECK(caches.cross[0].entries() == cross_entries);
  }
}

TEST_CASE("decode_step validates cache/position consistency") {
  Model m = Model::random_init(ModelSpec::toy(), 17);
  const std::vector<int> src = random_tokens(32, 5, 64);
  Matrix enc_states = encode(m, src);
  DecoderCaches caches = DecoderCaches::make(m.spec);
  decode_step(m, kBosToken, 0, enc_states, caches);
  CHECK_THROWS_AS(decode_step(m, 5, 0, enc_states, caches), StateError);
  CHECK_THROWS_AS(decode_step(m, 5, 2, enc_states, caches), StateError);
  CHECK_THROWS_AS(decode_step(m, 5, 500, enc_states, caches), ArgumentError);
}

TEST_CASE("greedy_decode stops immediately when EOS dominates") {
  Model m = Model::random_init(ModelSpec::toy(), 57);
  m.w_out.fill(0.0);
  m.b_out.fill(0.0);
  m.b_out.at(0, kEosToken) = 50.0;
  CHECK(greedy_decode(m, random_tokens(33, 6, 64), 20).empty());
}

TEST_CASE("greedy_decode is deterministic and caps at max_len") {
  Model m = Model::random_init(ModelSpec::toy(), 58);
  const std::vector<int> src = random_tokens(34, 6, 64);
  const std::vector<int> a = greedy_decode(m, src, 12);
  const std::vector<int> b = greedy_decode(m, src, 12);
  CHECK(a == b);
  CHECK(a.size() <= 12);
}

TEST_CASE("toy spec validation") {
  ModelSpec bad = ModelSpec::toy();
  bad.n_heads = 5;  // 64 % 5 != 0
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  ModelSpec bad2 = ModelSpec::toy();
  bad2.decoder_self.variant = AttentionVariant::mla_preserving;
  bad2.decoder_self.d_latent = 8;
  bad2.decoder_self.r_per_head = 0;
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}
