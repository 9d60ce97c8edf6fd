#pragma once

#include <vector>

#include "wmla/matrix.hpp"
#include "wmla/model.hpp"
#include "wmla/rng.hpp"

namespace wmla::testutil {

inline Matrix random_matrix(uint64_t seed, int64_t rows, int64_t cols, double scale = 1.0) {
  Rng rng(seed);
  return rng.normal_matrix(rows, cols, scale);
}

inline std::vector<int> random_tokens(uint64_t seed, int64_t len, int64_t vocab) {
  Rng rng(seed);
  std::vector<int> out;
  for (int64_t i = 0; i < len; ++i)
    out.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, vocab)));
  return out;
}

// Toy spec with the requested variant at every attention site.
inline ModelSpec spec_with_variant(AttentionVariant v, int64_t d_latent = 8, int64_t r = 1) {
  ModelSpec spec = ModelSpec::toy();
  for (Site s : {Site::encoder_self, Site::decoder_self, Site::cross}) {
    AttentionConfig& c = spec.site(s);
    c.variant = v;
    c.d_latent = v == AttentionVariant::mha ? 0 : d_latent;
    c.r_per_head = v == AttentionVariant::mla_preserving ? r : 0;
  }
  return spec;
}

}  // namespace wmla::testutil
