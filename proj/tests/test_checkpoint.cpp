#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "wmla/checkpoint.hpp"
#include "wmla/errors.hpp"
#include "wmla/model.hpp"

using namespace wmla;

namespace {

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("save -> load -> save reproduces the file byte for byte") {
  Model m = Model::random_init(testutil::spec_with_variant(AttentionVariant::mla_preserving), 91);
  const std::string p1 = tmp_path("wmla_rt1.wmla");
  const std::string p2 = tmp_path("wmla_rt2.wmla");
  save_checkpoint(m, p1);
  Model loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  CHECK(read_all(p1) == read_all(p2));

  // tensors survive the f32 round trip exactly on re-load
  Model again = load_checkpoint(p2);
  bool equal = true;
  std::vector<const Matrix*> a, b;
  loaded.visit_tensors([&a](const std::string&, const Matrix& t) { a.push_back(&t); });
  again.visit_tensors([&b](const std::string&, const Matrix& t) { b.push_back(&t); });
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i]->data() != b[i]->data()) equal = false;
  CHECK(equal);
}

TEST_CASE("container re-serialization is byte-identical") {
  Model m = Model::random_init(ModelSpec::toy(), 92);
  const auto buf = m.to_container().serialize();
  const auto buf2 = CheckpointContainer::deserialize(buf).serialize();
  CHECK(buf == buf2);
}

TEST_CASE("truncated payload raises a format error and returns nothing partial") {
  Model m = Model::random_init(ModelSpec::toy(), 93);
  auto buf = m.to_container().serialize();
  buf.pop_back();
  CHECK_THROWS_WITH_AS(CheckpointContainer::deserialize(buf),
                       doctest::Contains("payload"), FormatError);
}

TEST_CASE("bad magic and version are rejected") {
  Model m = Model::random_init(ModelSpec::toy(), 94);
  auto buf = m.to_container().serialize();
  auto bad_magic = buf;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(CheckpointContainer::deserialize(bad_magic),
                       doctest::Contains("magic"), FormatError);
  auto bad_version = buf;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(CheckpointContainer::deserialize(bad_version),
                       doctest::Contains("version"), FormatError);
}

TEST_CASE("overlapping or non-contiguous offsets are rejected") {
  CheckpointContainer c;
  c.model_spec = ModelSpec::toy().to_json();
  Matrix t1(1, 2);
  t1.at(0, 0) = 1.0;
  c.add_f32("a", t1);
  c.add_f32("b", t1);
  auto buf = c.serialize();
  // tamper: point tensor b's offset back into tensor a
  std::string s(buf.begin(), buf.end());
  const size_t pos = s.rfind("\"offset\":8");
  REQUIRE(pos != std::string::npos);
  s.replace(pos, 10, "\"offset\":4");
  std::vector<uint8_t> tampered(s.begin(), s.end());
  CHECK_THROWS_WITH_AS(CheckpointContainer::deserialize(tampered),
                       doctest::Contains("offset"), FormatError);
}

TEST_CASE("model load validates the tensor table strictly") {
  Model m = Model::random_init(ModelSpec::toy(), 95);
  CheckpointContainer c = m.to_container();

  SUBCASE("missing tensor") {
    c.tensors.erase(c.tensors.begin());
    CHECK_THROWS_WITH_AS(Model::from_container(c), doctest::Contains("missing"), FormatError);
  }
  SUBCASE("unexpected tensor") {
    Matrix extra(1, 1);
    c.add_f32("stray", extra);
    CHECK_THROWS_WITH_AS(Model::from_container(c), doctest::Contains("unexpected"), FormatError);
  }
  SUBCASE("wrong shape") {
    c.tensors[0].shape = {1, 1};
    c.tensors[0].bytes.resize(4);
    CHECK_THROWS_WITH_AS(Model::from_container(c), doctest::Contains("shape"), FormatError);
  }
}

TEST_CASE("non-finite payload values are rejected") {
  Model m = Model::random_init(ModelSpec::toy(), 96);
  CheckpointContainer c = m.to_container();
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(c.tensors[0].bytes.data(), &inf, 4);
  CHECK_THROWS_WITH_AS(Model::from_container(c), doctest::Contains("non-finite"), FormatError);
}
