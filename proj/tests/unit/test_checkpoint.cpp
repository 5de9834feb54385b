#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "rwl/checkpoint.hpp"

using namespace rwl;
using namespace rwl::checkpoint;

namespace {

encoder::EncoderConfig tiny_encoder() {
  encoder::EncoderConfig c;
  c.n_layers = 1;
  c.feature_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.conv_channels = {4, 4};
  return c;
}

bool bit_identical(const encoder::EncoderState& a, const encoder::EncoderState& b) {
  if (!(a.config == b.config) || a.rng_seed != b.rng_seed || a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    const auto it = b.params.find(name);
    if (it == b.params.end() || it->second.shape() != t.shape()) return false;
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (std::bit_cast<std::uint64_t>(t.data()[i]) != std::bit_cast<std::uint64_t>(it->second.data()[i])) return false;
  }
  return true;
}

CheckpointErrorKind error_kind(const std::string& bytes) {
  try {
    deserialize(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("checkpoint was accepted");
  return CheckpointErrorKind::kCorrupt;
}

// Offset of the parameter count, just after the config and source hash.
std::size_t count_offset(const std::string& bytes) {
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + 8, 8);
  return 16 + n + 8;
}

}  // namespace

TEST_CASE("round-trip is bit-exact") {
  encoder::EncoderState s = encoder::initialize(tiny_encoder(), 5);
  s.rng_seed = 0xFEEDFACECAFEBEEFULL;
  auto w = s.params.begin()->second.data();
  w[0] = -0.0;
  w[1] = std::numeric_limits<double>::denorm_min();
  w[2] = std::nextafter(1.0, 2.0);

  const Checkpoint ck = deserialize(serialize(s, 0x1234));
  CHECK(ck.source_hash == 0x1234);
  CHECK(bit_identical(s, ck.state));
  CHECK(serialize(ck.state, 0x1234) == serialize(s, 0x1234));

  const auto path = std::filesystem::temp_directory_path() / "rwl_test_checkpoint.rwl";
  save_checkpoint(s, path, 99);
  const Checkpoint from_disk = load_checkpoint(path);
  CHECK(from_disk.source_hash == 99);
  CHECK(bit_identical(s, from_disk.state));
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  std::filesystem::remove(path);
}

TEST_CASE("layout starts with magic and version") {
  const std::string bytes = serialize(encoder::initialize(tiny_encoder(), 1), 0);
  CHECK(bytes.substr(0, 4) == "RWL1");
  CHECK(static_cast<unsigned char>(bytes[4]) == kVersion);
  CHECK(bytes.substr(5, 3) == std::string(3, '\0'));
}

TEST_CASE("rejections") {
  const std::string good = serialize(encoder::initialize(tiny_encoder(), 3), 7);

  SUBCASE("first 4 bytes replaced") {
    std::string b = good;
    b.replace(0, 4, "XXXX");
    CHECK(error_kind(b) == CheckpointErrorKind::kNotACheckpoint);
    try {
      deserialize(b);
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).starts_with("not a checkpoint"));
    }
    CHECK(error_kind("") == CheckpointErrorKind::kNotACheckpoint);
    CHECK(error_kind("RW") == CheckpointErrorKind::kNotACheckpoint);
  }
  SUBCASE("wrong version") {
    std::string b = good;
    b[4] = 2;
    CHECK(error_kind(b) == CheckpointErrorKind::kUnsupportedVersion);
    try {
      deserialize(b);
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).starts_with("unsupported version"));
    }
  }
  SUBCASE("every truncation") {
    for (std::size_t n = 4; n < good.size(); n += (n < 200 ? 1 : 97))
      CHECK(error_kind(good.substr(0, n)) == CheckpointErrorKind::kCorrupt);
    CHECK(error_kind(good.substr(0, good.size() - 1)) == CheckpointErrorKind::kCorrupt);
  }
  SUBCASE("trailing bytes") { CHECK(error_kind(good + '\0') == CheckpointErrorKind::kCorrupt); }
  SUBCASE("shape disagrees with config") {
    // First parameter: count(4) name_len(4) name rank(4) dims...
    std::string b = good;
    const std::size_t at = count_offset(b) + 4;
    std::uint32_t name_len = 0;
    std::memcpy(&name_len, b.data() + at, 4);
    const std::size_t dim0 = at + 4 + name_len + 4;
    b[dim0] = static_cast<char>(b[dim0] + 1);
    CHECK(error_kind(b) == CheckpointErrorKind::kCorrupt);
  }
  SUBCASE("parameter count disagrees with config") {
    std::string b = good;
    b[count_offset(b)] = static_cast<char>(b[count_offset(b)] - 1);
    CHECK(error_kind(b) == CheckpointErrorKind::kCorrupt);
  }
  SUBCASE("unparseable config") {
    std::string b = good;
    b[16] = '!';
    CHECK(error_kind(b) == CheckpointErrorKind::kCorrupt);
  }
}

TEST_CASE("save refuses a state that does not match its config") {
  encoder::EncoderState s = encoder::initialize(tiny_encoder(), 3);
  s.params.erase(s.params.begin());
  CHECK_THROWS_AS(serialize(s, 0), std::invalid_argument);
}
