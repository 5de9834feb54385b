#pragma once

// Toy speech encoder: a stack of strided 1-D convolutions (kernel == stride,
// no padding) followed by post-norm transformer layers with sinusoidal
// positions. Level 0 of the activations is the feature-extractor output,
// levels 1..n_layers are the transformer layer outputs.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <string>
#include <vector>

#include "rwl/corpus.hpp"
#include "rwl/random.hpp"
#include "rwl/tensor.hpp"

namespace rwl::encoder {

struct EncoderConfig {
  std::vector<std::size_t> conv_strides{4, 4, 4};
  // Output channels of every conv except the last, which emits feature_dim.
  std::vector<std::size_t> conv_channels{16, 32};
  std::size_t feature_dim = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;

  void validate() const;
  // Raw samples per output frame.
  std::size_t receptive_field() const;
  std::size_t frame_count(std::size_t samples) const;
};

using ParameterMap = std::map<std::string, Tensor>;

struct EncoderState {
  EncoderConfig config;
  ParameterMap params;
  std::uint64_t rng_seed = 0;
};

// Parameter names and shapes implied by a config, in canonical order.
std::map<std::string, Shape> parameter_shapes(const EncoderConfig& config);

EncoderState initialize(const EncoderConfig& config, std::uint64_t seed);

enum class Mode { kTrain, kEval };

// Raw-sample span replaced by the mask embedding at the feature level.
struct SampleSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const SampleSpan&, const SampleSpan&) = default;
};

// Frames of `receptive_field` samples overlapping the span.
std::vector<bool> frames_overlapping(const SampleSpan& span, std::size_t frame_count, std::size_t receptive_field);

struct LayerActivations {
  std::vector<Var> levels;
  std::size_t frames() const { return levels.empty() ? 0 : levels.front().value().rows(); }
};

// Places an encoder's parameters on a tape, as variables when trainable.
class EncoderBinding {
 public:
  EncoderBinding(const EncoderState& state, Tape& tape, bool trainable);

  const EncoderConfig& config() const { return config_; }
  Tape& tape() const { return *tape_; }
  Var param(const std::string& name) const;
  const std::map<std::string, Var>& params() const { return vars_; }
  ParameterMap gradients(const Gradients& grads) const;
  // Substitutes a node of matching shape for one parameter.
  void set_param(const std::string& name, Var value);

 private:
  EncoderConfig config_;
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

// Feature-extractor output [m x feature_dim]; throws when the waveform is
// shorter than the receptive field.
Var extract_features(const EncoderBinding& enc, std::span<const float> samples);

// In train mode `rng` drives attention, hidden and input dropout.
LayerActivations encode(const EncoderBinding& enc, std::span<const float> samples, Mode mode, Rng* rng = nullptr,
                        const std::optional<SampleSpan>& mask = std::nullopt);

// Eval-mode activations as plain tensors.
std::vector<Tensor> encode_eval(const EncoderState& state, std::span<const float> samples);

Var utterance_embedding(const LayerActivations& acts, std::size_t level);
Tensor utterance_embedding(std::span<const Tensor> levels, std::size_t level);

// softmax(logits)-weighted sum of all levels; logits has n_layers + 1 entries.
Var weighted_layer_sum(const LayerActivations& acts, Var logits);

// What the reconstruction head regresses for each masked frame: its raw
// samples, or the magnitudes of their length-rf DFT (phase-invariant).
enum class ReconTarget { kSamples, kSpectrum };

std::string_view to_string(ReconTarget t);
ReconTarget parse_recon_target(std::string_view name);

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  double mask_fraction = 0.2;
  std::size_t length_threshold = 6400;
  ReconTarget target = ReconTarget::kSpectrum;
  std::uint64_t seed = 17;
};

// Reconstruction target for one frame of rf raw samples.
std::vector<double> recon_target(std::span<const float> frame, ReconTarget target);

struct PretrainResult {
  EncoderState state;
  std::vector<double> losses;
};

// Masked-frame reconstruction: a random ceil(p * m) subset of feature frames
// is replaced by the mask embedding and the top layer regresses the
// recon_target of those frames through a linear head.
PretrainResult pretrain_base(const EncoderState& initial, const corpus::LabeledCorpus& corpus,
                             const PretrainConfig& config);

// Mean reconstruction loss over the given utterances with a fixed mask seed.
double reconstruction_loss(const EncoderState& state, const corpus::LabeledCorpus& corpus,
                           std::span<const std::size_t> indices, const PretrainConfig& config);

}  // namespace rwl::encoder
