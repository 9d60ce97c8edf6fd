#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wmla/conversion.hpp"

namespace wmla {

enum class ReductionBasis { key_only, key_value };

const char* to_string(ReductionBasis b);

// Exact rational percentage: percent = 100 * num / den before any formatting.
struct ReductionRatio {
  int64_t num = 0;
  int64_t den = 1;
  double percent() const { return 100.0 * static_cast<double>(num) / static_cast<double>(den); }
};

// key_only: 1 - (d_latent + n_preserved)/d_model; key_value: same over
// 2*d_model. Throws ArgumentError when the configuration is not a compression.
ReductionRatio reduction_ratio(ReductionBasis basis, int64_t d_model, int64_t d_latent,
                               int64_t n_preserved);

// Decimal expansion with at least two fractional digits, extra digits only
// when needed (87.50%, 81.25%, 90.625%).
std::string format_percent(const ReductionRatio& r);

// Static dimensions behind the analytic cache estimator; no weights or
// activations, cache entries only.
struct MemConfig {
  int64_t d_model = 768;
  int64_t n_heads = 12;
  int64_t n_encoder_layers = 12;
  int64_t n_decoder_layers = 12;
  int64_t d_latent = 96;
  int64_t r_per_head = 2;  // n_preserved = 2 * r * n_heads
  int64_t bytes_per_entry = 2;

  int64_t n_preserved() const { return 2 * r_per_head * n_heads; }
  static MemConfig whisper_small();
  static MemConfig toy();
};

// Which sites hold an MLA cache: none (the MHA baseline), decoder self only
// (DSO), or all three (full conversion).
enum class MemPlacement { none, dso, full };

const char* to_string(MemPlacement p);
MemPlacement mem_placement_from_string(const std::string& s);

struct CacheFootprint {
  int64_t bytes_total = 0;
  int64_t bytes_decoder_self = 0;  // grows with generated_len
  int64_t bytes_cross = 0;         // static after one encoder pass
  int64_t bytes_encoder_self = 0;  // static after one encoder pass
};

// Decoder-self scales with generated_len, encoder-self and cross with
// source_len; everything is linear in batch.
CacheFootprint footprint(const MemConfig& cfg, MemPlacement placement, int64_t batch,
                         int64_t generated_len, int64_t source_len);

struct SweepRow {
  std::string model;  // "mha" or "mla"
  MemPlacement placement = MemPlacement::none;
  int64_t batch = 0;
  int64_t seq_len = 0;
  int64_t source_len = 0;
  CacheFootprint fp;
  bool oom = false;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::string to_csv() const;  // schema: model,placement,batch,seq_len,source_len,
                               // bytes_total,bytes_decoder_self,bytes_cross,bytes_encoder_self,oom
};

// One MHA row and one MLA row per (batch, length) grid point; the OOM flag is
// set where bytes_total exceeds the budget.
SweepResult sweep(const MemConfig& cfg, MemPlacement mla_placement,
                  const std::vector<int64_t>& batches, const std::vector<int64_t>& lengths,
                  int64_t source_len, std::optional<int64_t> budget_bytes);

}  // namespace wmla
