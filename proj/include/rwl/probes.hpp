#pragma once

// Frozen-encoder evaluation. Encoder activations are computed once per
// utterance in eval mode and cached; probe heads (softmax layer weights plus a
// linear classifier) train on the cache, so the encoder cannot change.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rwl/corpus.hpp"
#include "rwl/encoder.hpp"
#include "rwl/tensor.hpp"

namespace rwl::probes {

enum class TaskKind { kContentCls, kIntentCls, kSpeakerCls, kFrameLabeling, kQbe };
enum class Metric { kAccuracy, kFrameF1, kPrecisionAtK };

std::string_view to_string(TaskKind k);
TaskKind parse_task(std::string_view name);
inline constexpr TaskKind kTrainableTasks[] = {TaskKind::kContentCls, TaskKind::kIntentCls, TaskKind::kSpeakerCls,
                                               TaskKind::kFrameLabeling};

struct TaskSpec {
  TaskKind kind = TaskKind::kContentCls;
  Metric metric = Metric::kAccuracy;
  std::size_t n_classes = 0;

  bool trainable() const { return kind != TaskKind::kQbe; }
  static TaskSpec make(TaskKind kind, const corpus::GeneratorConfig& generator = {});
};

// Cached activations for a set of utterances. For classification each item
// holds the per-level frame means [levels x d]; for frame labeling it holds
// every level's frames, stacked level-major [levels * m x d].
struct FeatureSet {
  TaskSpec task;
  std::size_t levels = 0;
  std::size_t dim = 0;
  std::vector<Tensor> items;
  std::vector<std::vector<std::size_t>> labels;  // one label per item or per frame

  std::size_t size() const { return items.size(); }
  std::size_t frames(std::size_t i) const { return items[i].rows() / levels; }
};

// Eval-mode activations indexed like corpus.utterances; entries outside the
// encoded indices stay empty.
using ActivationCache = std::vector<std::vector<Tensor>>;
ActivationCache encode_corpus(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                              std::span<const std::size_t> indices);

FeatureSet extract_features(const ActivationCache& cache, const encoder::EncoderConfig& config,
                            const corpus::LabeledCorpus& corpus, std::span<const std::size_t> indices,
                            const TaskSpec& task);
FeatureSet extract_features(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                            std::span<const std::size_t> indices, const TaskSpec& task);

struct ProbeHead {
  Tensor layer_logits;  // [levels]
  Tensor weight;        // [d x n_classes]
  Tensor bias;          // [n_classes]

  static ProbeHead initialize(std::size_t levels, std::size_t dim, std::size_t n_classes, std::uint64_t seed);
};

// Argmax predictions: one per item, or one per frame concatenated over items.
std::vector<std::size_t> predict(const ProbeHead& head, const FeatureSet& data);

double evaluate_classification(const ProbeHead& head, const FeatureSet& data);
// Macro F1 over the classes present in gold.
double frame_label_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> gold);
double evaluate(const ProbeHead& head, const FeatureSet& data);

struct ProbeConfig {
  std::size_t budget = 1000;
  std::size_t eval_every = 25;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 31;
};

struct TrainRecord {
  std::vector<std::pair<std::size_t, double>> curve;  // (step, dev metric)
  double best_dev = 0.0;
  std::size_t steps_to_best = 0;
  double test_at_best = 0.0;
};

// Earliest recorded step whose dev metric reaches `target`, if any.
std::optional<std::size_t> first_step_reaching(const TrainRecord& record, double target);

struct ProbeResult {
  TrainRecord record;
  ProbeHead head;  // snapshot at steps_to_best
};

ProbeResult fit_probe(const FeatureSet& train, const FeatureSet& dev, const FeatureSet& test,
                      const ProbeConfig& config);

// Convenience over a corpus whose train split is the (sub)sampled training set.
ProbeResult fit_probe(const encoder::EncoderState& state, const TaskSpec& task, const corpus::LabeledCorpus& corpus,
                      const ProbeConfig& config);

// Cosine distance 1 - a.b / sqrt(a.a * b.b); zero rows are an error.
double cosine_distance(std::span<const double> a, std::span<const double> b);

// Minimum accumulated cost over monotone alignments with steps (1,0), (0,1),
// (1,1), ties broken toward the shorter path, divided by the path length.
// Costs are summed exactly on a grid of 2^-53, the resolution of cosine
// distances in [0, 2]; other costs are rounded onto it.
inline constexpr int kCostFractionBits = 53;
std::int64_t cost_units(double c);
inline double path_average(__int128 units, std::size_t length) {
  return static_cast<double>(static_cast<long double>(units) / static_cast<long double>(length) /
                             static_cast<long double>(std::int64_t{1} << kCostFractionBits));
}
double dtw_from_costs(const Tensor& costs);
double dtw_distance(const Tensor& a, const Tensor& b);

struct QbeResult {
  std::vector<std::size_t> ranking;  // document indices, nearest first
  double precision = 0.0;
};

// Ranks documents by DTW distance; documents[i] has label doc_labels[i].
QbeResult qbe_retrieve(const Tensor& query, int query_label, std::span<const Tensor> documents,
                       std::span<const int> doc_labels, std::size_t k);

// Uniform average of all levels, the zero-shot frame representation.
Tensor uniform_frames(std::span<const Tensor> levels);
Tensor uniform_frames(const encoder::EncoderState& state, std::span<const float> samples);

// Mean precision@k of test-split queries against dev-split documents.
double qbe_precision(const ActivationCache& cache, const corpus::LabeledCorpus& corpus, std::size_t k);
double qbe_precision(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus, std::size_t k);

}  // namespace rwl::probes
