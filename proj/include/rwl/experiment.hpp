#pragma once

// Experiment configuration. The on-disk form is a flat INI-style file:
//
//   [section]
//   key = value   ; or # comments
//
// Sections are applied in file order; `[rewire]` sets all three strategies,
// `[rewire.twin]` and friends set one. `--set section.key=value` overrides use
// the same keys. The canonical text (to_ini) is what gets hashed and stored.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "rwl/corpus.hpp"
#include "rwl/encoder.hpp"
#include "rwl/probes.hpp"
#include "rwl/rewire.hpp"

namespace rwl::experiment {

inline constexpr std::array<double, 4> kFractions{0.01, 0.05, 0.10, 1.0};

// "1pct", "5pct", "10pct", "100pct".
std::string fraction_label(double fraction);

struct ProbeSettings {
  std::size_t eval_every = 25;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  // Keyed by fraction_label, optionally suffixed ".<task>" for a task override.
  std::map<std::string, std::size_t> budgets{{"1pct", 500}, {"5pct", 1000}, {"10pct", 1000}, {"100pct", 2000}};

  std::size_t budget(probes::TaskKind task, double fraction) const;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t utterances = 2000;
  std::size_t qbe_k = 5;
  // Level whose frame mean is the diagnostic embedding; unset means the top.
  std::optional<std::size_t> embedding_level;
  corpus::GeneratorConfig corpus;
  encoder::EncoderConfig encoder;
  encoder::PretrainConfig pretrain;
  std::map<rewire::PairStrategy, rewire::RewireConfig> rewire = default_rewire();
  ProbeSettings probe;

  static std::map<rewire::PairStrategy, rewire::RewireConfig> default_rewire();

  // Stage seeds, all derived from `seed`.
  std::uint64_t corpus_seed() const;
  std::uint64_t init_seed() const;
  std::uint64_t pretrain_seed() const;
  std::uint64_t rewire_seed() const;
  std::uint64_t subsample_seed() const;
  std::uint64_t probe_seed() const;
  std::uint64_t diagnostic_seed() const;

  // Component configs with the derived seeds filled in.
  encoder::PretrainConfig pretrain_config() const;
  rewire::RewireConfig rewire_config(rewire::PairStrategy s) const;
  probes::ProbeConfig probe_config(probes::TaskKind task, double fraction) const;

  std::size_t diagnostic_level() const { return embedding_level.value_or(encoder.n_layers); }

  void validate() const;
};

// Throws std::invalid_argument naming the section and key.
void set_value(ExperimentConfig& config, std::string_view section, std::string_view key, std::string_view value);
// "section.key=value"; the section may itself contain dots (rewire.twin).
void apply_override(ExperimentConfig& config, std::string_view assignment);
void apply_ini(ExperimentConfig& config, std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

std::string to_ini(const ExperimentConfig& config);
// FNV-1a 64 of the canonical text.
std::uint64_t config_hash(const ExperimentConfig& config);

}  // namespace rwl::experiment
