#pragma once

// Contrastive rewiring of a pretrained encoder. Each anchor utterance is
// paired with a positive (a masked twin, its neutral re-rendering, or a coin
// flip between the two) and contrasted against in-batch negatives with
// InfoNCE over cosine similarities of pooled embeddings.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rwl/corpus.hpp"
#include "rwl/encoder.hpp"
#include "rwl/random.hpp"
#include "rwl/tensor.hpp"

namespace rwl::rewire {

enum class PairStrategy { kTwin, kNeutral, kMixed };

std::string_view to_string(PairStrategy s);
PairStrategy parse_strategy(std::string_view name);
inline constexpr PairStrategy kAllStrategies[] = {PairStrategy::kTwin, PairStrategy::kNeutral, PairStrategy::kMixed};

struct RewireConfig {
  double temperature = 0.04;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  double mask_fraction = 0.20;
  std::size_t length_threshold = 6400;
  std::size_t updates = 0;
  double dropout = 0.1;
  std::uint64_t seed = 23;
  // Level fed to the pooled embedding; unset means the top layer.
  std::optional<std::size_t> pooling_level;

  void validate() const;
};

// Desk update budgets: Twin 400, Neutral 2800, Mixed 1200.
std::size_t default_updates(PairStrategy s);

// A waveform plus the raw span the encoder should mask, if any.
struct Member {
  std::vector<float> samples;
  std::optional<encoder::SampleSpan> mask;
};

// start ~ U[0, (1-p)L), length ceil(pL). Masked raw samples are zeroed.
Member mask_span(std::span<const float> w, double p, Rng& rng);

// Which half a long waveform is cut to; nullopt when L <= threshold.
enum class Half { kFirst, kSecond };
std::optional<Half> choose_half(std::size_t length, std::size_t threshold, Rng& rng);
std::vector<float> take_half(std::span<const float> w, std::optional<Half> half);
std::vector<float> truncate_long(std::span<const float> w, std::size_t threshold, Rng& rng);

enum class PositiveKind { kTwin, kNeutral };

// Mixed flips a fair coin; the others are fixed.
PositiveKind choose_positive_kind(PairStrategy s, Rng& rng);

// Positive for an already truncated anchor. `half` is the truncation applied
// to the anchor so the neutral rendering is cut identically.
Member build_positive(std::span<const float> anchor, const corpus::UtteranceSpec* spec, PositiveKind kind,
                      std::optional<Half> half, const RewireConfig& config, Rng& rng,
                      const corpus::GeneratorConfig& generator = {});

// Batch members live in pools; pairs refer to them by (pool, index).
enum class Pool { kAnchor, kTwin, kNeutral };
struct MemberRef {
  Pool pool;
  std::size_t index;
  friend bool operator==(const MemberRef&, const MemberRef&) = default;
};

struct ContrastiveBatch {
  PairStrategy strategy;
  std::vector<std::size_t> utterances;  // corpus indices of the anchors
  std::vector<Member> anchors;
  std::vector<Member> twins;     // filled for Twin and Mixed
  std::vector<Member> neutrals;  // filled for Neutral and Mixed
  std::vector<MemberRef> positives;

  std::size_t size() const { return anchors.size(); }
  const Member& member(MemberRef r) const;
};

ContrastiveBatch build_batch(const corpus::LabeledCorpus& corpus, std::span<const std::size_t> utterances,
                             PairStrategy strategy, const RewireConfig& config, Rng& rng);

// N_i: other anchors plus the other anchors' twins and/or neutrals.
std::vector<MemberRef> build_negatives(const ContrastiveBatch& batch, std::size_t i);

// Sum over anchors of -log softmax of the positive among {positive} + N_i,
// on cosine / temperature.
Var infonce_loss(std::span<const Var> anchors, std::span<const Var> positives,
                 std::span<const std::vector<Var>> negatives, double temperature);

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct RewireResult {
  encoder::EncoderState state;
  std::vector<LogEntry> log;
};

using StepCallback = std::function<void(const LogEntry&)>;

RewireResult rewire(const encoder::EncoderState& initial, const corpus::LabeledCorpus& corpus, PairStrategy strategy,
                    const RewireConfig& config, const StepCallback& on_step = {});

// Mean eval-mode cosine between each utterance's embedding and the embedding
// of its twin (kTwin) or neutral rendering (kNeutral).
double mean_pair_cosine(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                        std::span<const std::size_t> indices, PositiveKind kind, const RewireConfig& config,
                        std::uint64_t seed);

}  // namespace rwl::rewire
