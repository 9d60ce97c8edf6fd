#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmla/matrix.hpp"

namespace wmla {

// Named-tensor file format, the repository's one bit-exact file contract:
//   "WMLA" magic | u32 version (LE) | u64 header length (LE) | header JSON | payload
// The header lists tensors (name, dtype, shape, offset, bytes) plus the model
// spec and an optional conversion spec; the payload is raw little-endian
// tensor data packed contiguously in header order. Reading a file and writing
// it back reproduces it byte for byte.

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'W', 'M', 'L', 'A'};

enum class TensorDType { f32, i32 };

const char* to_string(TensorDType t);
TensorDType dtype_from_string(const std::string& s);
int64_t dtype_size(TensorDType t);

struct TensorRecord {
  std::string name;
  TensorDType dtype = TensorDType::f32;
  std::vector<int64_t> shape;
  std::vector<uint8_t> bytes;  // little-endian payload slice

  int64_t numel() const;
};

struct CheckpointContainer {
  uint32_t version = kCheckpointVersion;
  nlohmann::ordered_json model_spec;                       // structured, canonical key order
  nlohmann::ordered_json conversion_spec = nullptr;        // null when not a converted model
  std::vector<TensorRecord> tensors;

  void add_f32(const std::string& name, const Matrix& m);  // f64 -> f32 narrowing
  void add_i32(const std::string& name, const std::vector<int64_t>& shape,
               const std::vector<int32_t>& values);

  const TensorRecord* find(const std::string& name) const;

  // f32 payload widened back to f64; validates finiteness.
  static Matrix as_matrix(const TensorRecord& t);
  static std::vector<int32_t> as_i32(const TensorRecord& t);

  void write_file(const std::string& path) const;
  // Validates magic, version, header structure, dtype/shape/offset consistency
  // and payload size before returning; throws FormatError naming the field.
  static CheckpointContainer read_file(const std::string& path);

  std::vector<uint8_t> serialize() const;
  static CheckpointContainer deserialize(const std::vector<uint8_t>& buf);
};

}  // namespace wmla
