#include "wmla/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "wmla/errors.hpp"

namespace wmla {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts are unsupported");

const char* to_string(TensorDType t) { return t == TensorDType::f32 ? "f32" : "i32"; }

TensorDType dtype_from_string(const std::string& s) {
  if (s == "f32") return TensorDType::f32;
  if (s == "i32") return TensorDType::i32;
  throw FormatError("tensors.dtype: unknown dtype '" + s + "'");
}

int64_t dtype_size(TensorDType) { return 4; }

int64_t TensorRecord::numel() const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

void CheckpointContainer::add_f32(const std::string& name, const Matrix& m) {
  TensorRecord t;
  t.name = name;
  t.dtype = TensorDType::f32;
  t.shape = {m.rows(), m.cols()};
  t.bytes.resize(static_cast<size_t>(m.size()) * 4);
  for (int64_t i = 0; i < m.size(); ++i) {
    const float f = static_cast<float>(m.data()[static_cast<size_t>(i)]);
    std::memcpy(t.bytes.data() + i * 4, &f, 4);
  }
  tensors.push_back(std::move(t));
}

void CheckpointContainer::add_i32(const std::string& name, const std::vector<int64_t>& shape,
                                  const std::vector<int32_t>& values) {
  TensorRecord t;
  t.name = name;
  t.dtype = TensorDType::i32;
  t.shape = shape;
  if (t.numel() != static_cast<int64_t>(values.size()))
    throw ArgumentError("add_i32: shape/value count mismatch");
  t.bytes.resize(values.size() * 4);
  std::memcpy(t.bytes.data(), values.data(), values.size() * 4);
  tensors.push_back(std::move(t));
}

const TensorRecord* CheckpointContainer::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

Matrix CheckpointContainer::as_matrix(const TensorRecord& t) {
  if (t.dtype != TensorDType::f32) throw FormatError("tensors.dtype: expected f32 for " + t.name);
  if (t.shape.size() != 2) throw FormatError("tensors.shape: expected rank 2 for " + t.name);
  Matrix m(t.shape[0], t.shape[1]);
  for (int64_t i = 0; i < m.size(); ++i) {
    float f;
    std::memcpy(&f, t.bytes.data() + i * 4, 4);
    if (!std::isfinite(f)) throw FormatError("tensors.data: non-finite value in " + t.name);
    m.data()[static_cast<size_t>(i)] = static_cast<double>(f);
  }
  return m;
}

std::vector<int32_t> CheckpointContainer::as_i32(const TensorRecord& t) {
  if (t.dtype != TensorDType::i32) throw FormatError("tensors.dtype: expected i32 for " + t.name);
  std::vector<int32_t> out(static_cast<size_t>(t.numel()));
  std::memcpy(out.data(), t.bytes.data(), out.size() * 4);
  return out;
}

std::vector<uint8_t> CheckpointContainer::serialize() const {
  nlohmann::ordered_json header;
  header["model_spec"] = model_spec;
  header["conversion_spec"] = conversion_spec;
  nlohmann::ordered_json tens = nlohmann::ordered_json::array();
  int64_t offset = 0;
  for (const auto& t : tensors) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["dtype"] = to_string(t.dtype);
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["bytes"] = static_cast<int64_t>(t.bytes.size());
    tens.push_back(std::move(e));
    offset += static_cast<int64_t>(t.bytes.size());
  }
  header["tensors"] = std::move(tens);
  const std::string hs = header.dump();

  std::vector<uint8_t> buf;
  buf.reserve(16 + hs.size() + static_cast<size_t>(offset));
  buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
  const uint32_t ver = version;
  buf.insert(buf.end(), reinterpret_cast<const uint8_t*>(&ver), reinterpret_cast<const uint8_t*>(&ver) + 4);
  const uint64_t hlen = hs.size();
  buf.insert(buf.end(), reinterpret_cast<const uint8_t*>(&hlen), reinterpret_cast<const uint8_t*>(&hlen) + 8);
  buf.insert(buf.end(), hs.begin(), hs.end());
  for (const auto& t : tensors) buf.insert(buf.end(), t.bytes.begin(), t.bytes.end());
  return buf;
}

CheckpointContainer CheckpointContainer::deserialize(const std::vector<uint8_t>& buf) {
  if (buf.size() < 16) throw FormatError("magic: file shorter than the fixed header");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("magic: expected \"WMLA\"");
  uint32_t ver;
  std::memcpy(&ver, buf.data() + 4, 4);
  if (ver != kCheckpointVersion)
    throw FormatError("version: unsupported version " + std::to_string(ver));
  uint64_t hlen;
  std::memcpy(&hlen, buf.data() + 8, 8);
  if (16 + hlen > buf.size()) throw FormatError("header: length exceeds file size");

  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<int64_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header: invalid JSON (") + e.what() + ")");
  }
  if (!header.contains("model_spec") || !header.contains("tensors"))
    throw FormatError("header: missing model_spec or tensors");

  CheckpointContainer c;
  c.version = ver;
  c.model_spec = header["model_spec"];
  c.conversion_spec = header.contains("conversion_spec") ? header["conversion_spec"]
                                                         : nlohmann::ordered_json(nullptr);

  const size_t payload_start = 16 + hlen;
  const int64_t payload_size = static_cast<int64_t>(buf.size() - payload_start);
  int64_t expect_offset = 0;
  for (const auto& e : header["tensors"]) {
    TensorRecord t;
    try {
      t.name = e.at("name").get<std::string>();
      t.dtype = dtype_from_string(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<std::vector<int64_t>>();
      const int64_t offset = e.at("offset").get<int64_t>();
      const int64_t nbytes = e.at("bytes").get<int64_t>();
      for (int64_t d : t.shape)
        if (d < 0) throw FormatError("tensors.shape: negative dimension in " + t.name);
      if (nbytes != t.numel() * dtype_size(t.dtype))
        throw FormatError("tensors.bytes: size does not match shape for " + t.name);
      if (offset != expect_offset)
        throw FormatError("tensors.offset: overlapping or non-contiguous offsets at " + t.name);
      if (offset + nbytes > payload_size)
        throw FormatError("payload: truncated (tensor " + t.name + " extends past end of file)");
      t.bytes.assign(buf.begin() + static_cast<int64_t>(payload_start) + offset,
                     buf.begin() + static_cast<int64_t>(payload_start) + offset + nbytes);
      expect_offset = offset + nbytes;
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("tensors: malformed entry (") + ex.what() + ")");
    }
    if (c.find(t.name)) throw FormatError("tensors.name: duplicate tensor " + t.name);
    c.tensors.push_back(std::move(t));
  }
  if (expect_offset != payload_size)
    throw FormatError("payload: size does not match the tensor table");
  return c;
}

void CheckpointContainer::write_file(const std::string& path) const {
  const auto buf = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("file: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError("file: short write to '" + path + "'");
}

CheckpointContainer CheckpointContainer::read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("file: cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(buf);
}

}  // namespace wmla
