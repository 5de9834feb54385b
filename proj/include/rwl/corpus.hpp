#pragma once

// Synthetic speech-like corpus. Each utterance is a sequence of content
// tokens rendered as pairs of sinusoids, coloured by speaker timbre, a
// per-token prosody envelope and additive noise. render_neutral() removes all
// non-content factors, standing in for a flat text-to-speech rendering of the
// transcript.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rwl/random.hpp"

namespace rwl::corpus {

// speaker_id value selecting the canonical (neutral) timbre.
inline constexpr int kNeutralSpeaker = -1;

struct Prosody {
  double amplitude = 1.0;
  double pitch_offset = 0.0;  // relative frequency shift
  friend bool operator==(const Prosody&, const Prosody&) = default;
};

struct UtteranceSpec {
  std::vector<int> content;
  int speaker_id = 0;
  std::vector<Prosody> prosody;  // one entry per token
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const UtteranceSpec&, const UtteranceSpec&) = default;
};

struct Waveform {
  std::vector<float> samples;
  std::size_t size() const { return samples.size(); }
  friend bool operator==(const Waveform&, const Waveform&) = default;
};

struct GeneratorConfig {
  int vocab_size = 32;
  int num_speakers = 8;
  int samples_per_token = 800;
  int min_tokens = 3;
  int max_tokens = 10;
  double sample_rate = 16000.0;
  double noise_min = 0.05;
  double noise_max = 0.2;
  double amplitude_min = 0.5;
  double amplitude_max = 1.5;
  double pitch_offset_max = 0.08;
  double timbre_spread = 0.5;  // speaker harmonic weights within +-50% of canonical
  double gain = 0.6;
  int intent_classes = 8;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct Utterance {
  UtteranceSpec spec;
  Waveform wave;
};

enum class Split { kTrain, kDev, kTest };

struct LabeledCorpus {
  GeneratorConfig config;
  std::vector<Utterance> utterances;
  // Indices into utterances.
  std::vector<std::size_t> train;
  std::vector<std::size_t> dev;
  std::vector<std::size_t> test;

  const std::vector<std::size_t>& split(Split s) const;
};

void validate(const UtteranceSpec& spec, const GeneratorConfig& config);

Waveform render(const UtteranceSpec& spec, const GeneratorConfig& config = {});

// Spec with every nuisance factor replaced by its canonical value.
UtteranceSpec neutralize(const UtteranceSpec& spec);
Waveform render_neutral(const UtteranceSpec& spec, const GeneratorConfig& config = {});

LabeledCorpus sample_corpus(std::size_t n, const GeneratorConfig& config, std::uint64_t seed);

// Stratified by content class. fraction must be one of 0.01, 0.05, 0.10, 1.0.
LabeledCorpus subsample_training(const LabeledCorpus& corpus, double fraction, std::uint64_t seed);

// Labels. All are pure functions of the spec.
int content_class(const UtteranceSpec& spec);
int intent_label(const UtteranceSpec& spec, int intent_classes = 8);
int speaker_label(const UtteranceSpec& spec);
// Token under the centre of each frame of `hop` samples.
std::vector<std::size_t> frame_labels(const UtteranceSpec& spec, std::size_t frame_count,
                                      std::size_t hop, int samples_per_token = 800);

// Manifest (JSON lines) + one little-endian float32 file per utterance.
void save_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir);
LabeledCorpus load_corpus(const std::filesystem::path& dir);

}  // namespace rwl::corpus
