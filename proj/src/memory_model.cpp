#include "wmla/memory_model.hpp"

#include <numeric>
#include <sstream>

#include "wmla/errors.hpp"

namespace wmla {

const char* to_string(ReductionBasis b) {
  return b == ReductionBasis::key_only ? "key_only" : "key_value";
}

ReductionRatio reduction_ratio(ReductionBasis basis, int64_t d_model, int64_t d_latent,
                               int64_t n_preserved) {
  if (d_model < 1 || d_latent < 0 || n_preserved < 0)
    throw ArgumentError("reduction_ratio: negative dimension");
  const int64_t used = d_latent + n_preserved;
  const int64_t base = basis == ReductionBasis::key_only ? d_model : 2 * d_model;
  if (used > base)
    throw ArgumentError("reduction_ratio: configuration is not a compression on this basis");
  ReductionRatio r;
  const int64_t g = std::gcd(base - used, base);
  r.num = (base - used) / g;
  r.den = base / g;
  return r;
}

std::string format_percent(const ReductionRatio& r) {
  // exact long division of 100*num/den, capped at 9 fractional digits
  int64_t whole = 100 * r.num / r.den;
  int64_t rem = 100 * r.num % r.den;
  std::string frac;
  for (int i = 0; i < 9 && rem != 0; ++i) {
    rem *= 10;
    frac.push_back(static_cast<char>('0' + rem / r.den));
    rem %= r.den;
  }
  while (frac.size() > 2 && frac.back() == '0') frac.pop_back();
  while (frac.size() < 2) frac.push_back('0');
  std::ostringstream os;
  os << whole << "." << frac << "%";
  return os.str();
}

MemConfig MemConfig::whisper_small() { return MemConfig{}; }

MemConfig MemConfig::toy() {
  MemConfig c;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 2;
  c.d_latent = 8;
  c.r_per_head = 1;
  return c;
}

const char* to_string(MemPlacement p) {
  switch (p) {
    case MemPlacement::none: return "none";
    case MemPlacement::dso: return "dso";
    case MemPlacement::full: return "full";
  }
  return "?";
}

MemPlacement mem_placement_from_string(const std::string& s) {
  if (s == "none") return MemPlacement::none;
  if (s == "dso") return MemPlacement::dso;
  if (s == "full") return MemPlacement::full;
  throw ArgumentError("unknown placement: " + s);
}

namespace {

int64_t entries_per_token(const MemConfig& cfg, bool converted) {
  return converted ? cfg.d_latent + cfg.n_preserved() : 2 * cfg.d_model;
}

}  // namespace

CacheFootprint footprint(const MemConfig& cfg, MemPlacement placement, int64_t batch,
                         int64_t generated_len, int64_t source_len) {
  if (batch < 0 || generated_len < 0 || source_len < 0)
    throw ArgumentError("footprint: negative grid point");
  const bool dec_self = placement != MemPlacement::none;
  const bool enc_and_cross = placement == MemPlacement::full;
  CacheFootprint f;
  f.bytes_decoder_self = entries_per_token(cfg, dec_self) * cfg.n_decoder_layers * generated_len *
                         batch * cfg.bytes_per_entry;
  f.bytes_cross = entries_per_token(cfg, enc_and_cross) * cfg.n_decoder_layers * source_len *
                  batch * cfg.bytes_per_entry;
  f.bytes_encoder_self = entries_per_token(cfg, enc_and_cross) * cfg.n_encoder_layers *
                         source_len * batch * cfg.bytes_per_entry;
  f.bytes_total = f.bytes_decoder_self + f.bytes_cross + f.bytes_encoder_self;
  return f;
}

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os << "model,placement,batch,seq_len,source_len,bytes_total,bytes_decoder_self,bytes_cross,"
        "bytes_encoder_self,oom\n";
  for (const SweepRow& r : rows) {
    os << r.model << "," << to_string(r.placement) << "," << r.batch << "," << r.seq_len << ","
       << r.source_len << "," << r.fp.bytes_total << "," << r.fp.bytes_decoder_self << ","
       << r.fp.bytes_cross << "," << r.fp.bytes_encoder_self << "," << (r.oom ? 1 : 0) << "\n";
  }
  return os.str();
}

SweepResult sweep(const MemConfig& cfg, MemPlacement mla_placement,
                  const std::vector<int64_t>& batches, const std::vector<int64_t>& lengths,
                  int64_t source_len, std::optional<int64_t> budget_bytes) {
  if (batches.empty() || lengths.empty()) throw ArgumentError("sweep: empty grid");
  if (mla_placement == MemPlacement::none)
    throw ArgumentError("sweep: the MLA column needs a conversion placement");
  SweepResult out;
  for (int64_t b : batches) {
    for (int64_t len : lengths) {
      for (MemPlacement p : {MemPlacement::none, mla_placement}) {
        SweepRow row;
        row.model = p == MemPlacement::none ? "mha" : "mla";
        row.placement = p;
        row.batch = b;
        row.seq_len = len;
        row.source_len = source_len;
        row.fp = footprint(cfg, p, b, len, source_len);
        row.oom = budget_bytes.has_value() && row.fp.bytes_total > *budget_bytes;
        out.rows.push_back(row);
      }
    }
  }
  return out;
}

}  // namespace wmla
