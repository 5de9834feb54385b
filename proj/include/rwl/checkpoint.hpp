#pragma once

// Binary encoder checkpoint, all integers little-endian:
//
//   "RWL1"  u32 version  u64 n  n bytes of config JSON  u64 source hash
//   u32 count, then per parameter:
//     u32 name length  name  u32 rank  rank x u64 dims  f64 data
//
// Parameters are written in canonical (sorted) order and must match the shapes
// implied by the stored config exactly.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "rwl/encoder.hpp"

namespace rwl::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

enum class CheckpointErrorKind { kNotACheckpoint, kUnsupportedVersion, kCorrupt };

// what() is "not a checkpoint", "unsupported version" or "corrupt checkpoint",
// followed by ": " and details.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& detail);
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  encoder::EncoderState state;
  std::uint64_t source_hash = 0;
};

std::string serialize(const encoder::EncoderState& state, std::uint64_t source_hash);
Checkpoint deserialize(const std::string& bytes);

// Writes via a temporary file and rename, so a visible file is complete.
void save_checkpoint(const encoder::EncoderState& state, const std::filesystem::path& path,
                     std::uint64_t source_hash = 0);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rwl::checkpoint
