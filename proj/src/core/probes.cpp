#include "rwl/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>

#include "rwl/kernels.hpp"
#include "rwl/optim.hpp"
#include "rwl/random.hpp"

namespace rwl::probes {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kContentCls: return "content_cls";
    case TaskKind::kIntentCls: return "intent_cls";
    case TaskKind::kSpeakerCls: return "speaker_cls";
    case TaskKind::kFrameLabeling: return "frame_labeling";
    case TaskKind::kQbe: return "qbe";
  }
  return "?";
}

TaskKind parse_task(std::string_view name) {
  for (TaskKind k : {TaskKind::kContentCls, TaskKind::kIntentCls, TaskKind::kSpeakerCls, TaskKind::kFrameLabeling,
                     TaskKind::kQbe})
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown task '" + std::string(name) +
                              "' (expected content_cls, intent_cls, speaker_cls, frame_labeling or qbe)");
}

TaskSpec TaskSpec::make(TaskKind kind, const corpus::GeneratorConfig& g) {
  switch (kind) {
    case TaskKind::kContentCls: return {kind, Metric::kAccuracy, static_cast<std::size_t>(g.vocab_size)};
    case TaskKind::kIntentCls: return {kind, Metric::kAccuracy, static_cast<std::size_t>(g.intent_classes)};
    case TaskKind::kSpeakerCls: return {kind, Metric::kAccuracy, static_cast<std::size_t>(g.num_speakers)};
    case TaskKind::kFrameLabeling: return {kind, Metric::kFrameF1, static_cast<std::size_t>(g.vocab_size)};
    case TaskKind::kQbe: return {kind, Metric::kPrecisionAtK, 0};
  }
  throw std::invalid_argument("TaskSpec::make: unknown task");
}

ActivationCache encode_corpus(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                              std::span<const std::size_t> indices) {
  ActivationCache cache(corpus.utterances.size());
  for (std::size_t idx : indices) cache.at(idx) = encoder::encode_eval(state, corpus.utterances.at(idx).wave.samples);
  return cache;
}

FeatureSet extract_features(const ActivationCache& cache, const encoder::EncoderConfig& config,
                            const corpus::LabeledCorpus& corpus, std::span<const std::size_t> indices,
                            const TaskSpec& task) {
  if (!task.trainable()) throw std::invalid_argument("extract_features: task has no trainable head");
  FeatureSet fs;
  fs.task = task;
  fs.levels = config.n_layers + 1;
  fs.dim = config.feature_dim;
  const std::size_t d = fs.dim;
  const int intents = corpus.config.intent_classes;
  for (std::size_t idx : indices) {
    const corpus::Utterance& u = corpus.utterances.at(idx);
    const std::vector<Tensor>& levels = cache.at(idx);
    if (levels.size() != fs.levels) throw std::invalid_argument("extract_features: utterance missing from cache");
    const std::size_t m = levels.front().rows();
    if (task.kind == TaskKind::kFrameLabeling) {
      Tensor all(Shape{fs.levels * m, d});
      for (std::size_t k = 0; k < fs.levels; ++k)
        std::copy(levels[k].data().begin(), levels[k].data().end(), all.ptr() + k * m * d);
      fs.items.push_back(std::move(all));
      fs.labels.push_back(corpus::frame_labels(u.spec, m, config.receptive_field(), corpus.config.samples_per_token));
    } else {
      Tensor means(Shape{fs.levels, d});
      for (std::size_t k = 0; k < fs.levels; ++k) {
        const Tensor e = encoder::utterance_embedding(levels, k);
        std::copy(e.data().begin(), e.data().end(), means.ptr() + k * d);
      }
      fs.items.push_back(std::move(means));
      int label = 0;
      switch (task.kind) {
        case TaskKind::kContentCls: label = corpus::content_class(u.spec); break;
        case TaskKind::kIntentCls: label = corpus::intent_label(u.spec, intents); break;
        case TaskKind::kSpeakerCls: label = corpus::speaker_label(u.spec); break;
        default: break;
      }
      fs.labels.push_back({static_cast<std::size_t>(label)});
    }
  }
  return fs;
}

FeatureSet extract_features(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                            std::span<const std::size_t> indices, const TaskSpec& task) {
  if (!task.trainable()) throw std::invalid_argument("extract_features: task has no trainable head");
  return extract_features(encode_corpus(state, corpus, indices), state.config, corpus, indices, task);
}

ProbeHead ProbeHead::initialize(std::size_t levels, std::size_t dim, std::size_t n_classes, std::uint64_t seed) {
  ProbeHead h;
  h.layer_logits = Tensor(Shape{levels});
  h.weight = Tensor(Shape{dim, n_classes});
  h.bias = Tensor(Shape{n_classes});
  Rng rng = make_rng(seed, 0x4EAD);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& w : h.weight.data()) w = uniform(rng, -bound, bound);
  return h;
}

namespace {

// Level-k rows of the chosen items, one matrix per level.
std::vector<Tensor> gather_levels(const FeatureSet& data, std::span<const std::size_t> items) {
  const std::size_t d = data.dim;
  std::size_t rows = 0;
  for (std::size_t i : items) rows += data.items[i].rows() / data.levels;
  std::vector<Tensor> out(data.levels, Tensor(Shape{rows, d}));
  std::size_t r = 0;
  for (std::size_t i : items) {
    const std::size_t m = data.items[i].rows() / data.levels;
    for (std::size_t k = 0; k < data.levels; ++k)
      std::copy_n(data.items[i].ptr() + k * m * d, m * d, out[k].ptr() + r * d);
    r += m;
  }
  return out;
}

std::vector<std::size_t> gather_labels(const FeatureSet& data, std::span<const std::size_t> items) {
  std::vector<std::size_t> out;
  for (std::size_t i : items) out.insert(out.end(), data.labels[i].begin(), data.labels[i].end());
  return out;
}

std::vector<std::size_t> all_items(const FeatureSet& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

struct HeadVars {
  Var logits, weight, bias;
};

Var head_logits(Tape& tape, const HeadVars& h, const std::vector<Tensor>& levels) {
  std::vector<Var> mats;
  mats.reserve(levels.size());
  for (const Tensor& t : levels) mats.push_back(tape.constant(t));
  Var rep = weighted_sum(mats, softmax(h.logits));
  return add_row(matmul(rep, h.weight), h.bias);
}

void check_compatible(const ProbeHead& head, const FeatureSet& data) {
  if (data.size() == 0) throw std::invalid_argument("probe evaluation: empty split");
  if (head.layer_logits.numel() != data.levels || head.weight.rows() != data.dim)
    throw ShapeError("probe head does not match the feature set");
}

}  // namespace

std::vector<std::size_t> predict(const ProbeHead& head, const FeatureSet& data) {
  check_compatible(head, data);
  std::vector<std::size_t> out;
  constexpr std::size_t kChunk = 256;
  for (std::size_t lo = 0; lo < data.size(); lo += kChunk) {
    std::vector<std::size_t> items(std::min(kChunk, data.size() - lo));
    std::iota(items.begin(), items.end(), lo);
    Tape tape;
    HeadVars h{tape.constant(head.layer_logits), tape.constant(head.weight), tape.constant(head.bias)};
    const Tensor z = head_logits(tape, h, gather_levels(data, items)).value();
    const std::size_t c = z.cols();
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const double* row = z.ptr() + r * c;
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + c) - row));
    }
  }
  return out;
}

double evaluate_classification(const ProbeHead& head, const FeatureSet& data) {
  const std::vector<std::size_t> pred = predict(head, data);
  const std::vector<std::size_t> gold = gather_labels(data, all_items(data));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) correct += pred[i] == gold[i];
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

double frame_label_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> gold) {
  if (predictions.size() != gold.size())
    throw std::invalid_argument("frame_label_f1: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(gold.size()) + " gold frames");
  if (gold.empty()) throw std::invalid_argument("frame_label_f1: no frames");
  std::map<std::size_t, std::size_t> tp, fp, fn;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predictions[i] == gold[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[gold[i]];
    }
  }
  const std::set<std::size_t> classes(gold.begin(), gold.end());
  double total = 0.0;
  for (std::size_t c : classes) {
    const double t = static_cast<double>(tp[c]);
    const double denom = 2.0 * t + static_cast<double>(fp[c]) + static_cast<double>(fn[c]);
    total += denom > 0.0 ? 2.0 * t / denom : 0.0;
  }
  return total / static_cast<double>(classes.size());
}

double evaluate(const ProbeHead& head, const FeatureSet& data) {
  if (data.task.kind != TaskKind::kFrameLabeling) return evaluate_classification(head, data);
  return frame_label_f1(predict(head, data), gather_labels(data, all_items(data)));
}

std::optional<std::size_t> first_step_reaching(const TrainRecord& record, double target) {
  for (const auto& [step, metric] : record.curve)
    if (metric >= target) return step;
  return std::nullopt;
}

ProbeResult fit_probe(const FeatureSet& train, const FeatureSet& dev, const FeatureSet& test,
                      const ProbeConfig& config) {
  if (train.size() == 0 || dev.size() == 0 || test.size() == 0)
    throw std::invalid_argument("fit_probe: empty split");
  if (config.eval_every == 0) throw std::invalid_argument("fit_probe: eval_every must be positive");
  if (config.batch_size == 0) throw std::invalid_argument("fit_probe: batch_size must be positive");
  const TaskSpec& task = train.task;
  ProbeResult result{{}, ProbeHead::initialize(train.levels, train.dim, task.n_classes, config.seed)};
  ProbeHead head = result.head;
  TrainRecord& rec = result.record;

  auto record_eval = [&](std::size_t step) {
    const double metric = evaluate(head, dev);
    rec.curve.emplace_back(step, metric);
    if (rec.curve.size() == 1 || metric > rec.best_dev) {
      rec.best_dev = metric;
      rec.steps_to_best = step;
      result.head = head;
    }
  };
  record_eval(0);

  Adam adam(AdamConfig{config.learning_rate});
  Rng rng = make_rng(config.seed, 0x960BE);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Tensor* params[] = {&head.layer_logits, &head.weight, &head.bias};
  for (std::size_t step = 1; step <= config.budget; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(config.batch_size, train.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    Tape tape;
    HeadVars h{tape.variable(head.layer_logits), tape.variable(head.weight), tape.variable(head.bias)};
    const std::vector<std::size_t> labels = gather_labels(train, batch);
    Var loss = cross_entropy(head_logits(tape, h, gather_levels(train, batch)), labels);
    Gradients g = tape.backward(loss);
    const Tensor grads[] = {g[h.logits], g[h.weight], g[h.bias]};
    const Tensor* gp[] = {&grads[0], &grads[1], &grads[2]};
    adam.step(params, gp);
    if (step % config.eval_every == 0 || step == config.budget) record_eval(step);
  }
  rec.test_at_best = evaluate(result.head, test);
  return result;
}

ProbeResult fit_probe(const encoder::EncoderState& state, const TaskSpec& task, const corpus::LabeledCorpus& corpus,
                      const ProbeConfig& config) {
  return fit_probe(extract_features(state, corpus, corpus.train, task),
                   extract_features(state, corpus, corpus.dev, task),
                   extract_features(state, corpus, corpus.test, task), config);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_distance: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine_distance: zero-norm frame");
  return 1.0 - ab / std::sqrt(aa * bb);
}

std::int64_t cost_units(double c) {
  if (!std::isfinite(c) || std::abs(c) > 1e6) throw std::domain_error("dtw: cost outside the supported range");
  return std::llround(std::ldexp(c, kCostFractionBits));
}

double dtw_from_costs(const Tensor& costs) {
  if (costs.rank() != 2 || costs.rows() == 0 || costs.cols() == 0)
    throw std::invalid_argument("dtw_distance: empty sequence");
  const std::size_t n = costs.rows(), m = costs.cols();
  // Exact accumulation keeps the cell-wise choice consistent with comparing
  // whole paths.
  struct Cell {
    __int128 cost;
    std::size_t length;
  };
  auto better = [](const Cell& x, const Cell& y) {
    return y.length == 0 || x.cost < y.cost || (x.cost == y.cost && x.length < y.length);
  };
  std::vector<Cell> prev(m), cur(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const std::int64_t c = cost_units(costs.at(i, j));
      if (i == 0 && j == 0) {
        cur[j] = {c, 1};
        continue;
      }
      Cell best{0, 0};
      if (i > 0 && j > 0 && better(prev[j - 1], best)) best = prev[j - 1];
      if (i > 0 && better(prev[j], best)) best = prev[j];
      if (j > 0 && better(cur[j - 1], best)) best = cur[j - 1];
      cur[j] = {best.cost + c, best.length + 1};
    }
    std::swap(prev, cur);
  }
  return path_average(prev[m - 1].cost, prev[m - 1].length);
}

double dtw_distance(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() == 0 || b.rows() == 0)
    throw std::invalid_argument("dtw_distance: empty sequence");
  if (a.cols() != b.cols()) throw ShapeError("dtw_distance: frame dimensions differ");
  Tensor costs(Shape{a.rows(), b.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) costs.at(i, j) = cosine_distance(a.row(i), b.row(j));
  return dtw_from_costs(costs);
}

namespace {

Tensor normalized_rows(const Tensor& x) {
  Tensor out = x;
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* p = out.ptr() + r * d;
    const double nn = kernels::active().dot(p, p, d);
    if (nn == 0.0) throw std::domain_error("qbe: zero-norm frame");
    kernels::active().scale(1.0 / std::sqrt(nn), p, p, d);
  }
  return out;
}

// 1 - cosine for all frame pairs, via one matrix product of unit rows.
Tensor distance_matrix(const Tensor& qn, const Tensor& dn) {
  const std::size_t n = qn.rows(), m = dn.rows(), d = qn.cols();
  Tensor dt(Shape{d, m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) dt.at(c, r) = dn.at(r, c);
  Tensor costs(Shape{n, m});
  kernels::active().gemm(qn.ptr(), dt.ptr(), costs.ptr(), n, d, m, false);
  for (auto& v : costs.data()) v = std::max(0.0, 1.0 - v);
  return costs;
}

}  // namespace

QbeResult qbe_retrieve(const Tensor& query, int query_label, std::span<const Tensor> documents,
                       std::span<const int> doc_labels, std::size_t k) {
  if (documents.size() != doc_labels.size()) throw std::invalid_argument("qbe_retrieve: one label per document");
  if (k == 0 || k > documents.size())
    throw std::invalid_argument("qbe_retrieve: k=" + std::to_string(k) + " with " + std::to_string(documents.size()) +
                                " documents");
  const Tensor qn = normalized_rows(query);
  std::vector<double> dist(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (documents[i].cols() != query.cols()) throw ShapeError("qbe_retrieve: frame dimensions differ");
    dist[i] = dtw_from_costs(distance_matrix(qn, normalized_rows(documents[i])));
  }
  QbeResult r;
  r.ranking.resize(documents.size());
  std::iota(r.ranking.begin(), r.ranking.end(), 0);
  std::stable_sort(r.ranking.begin(), r.ranking.end(), [&](std::size_t x, std::size_t y) { return dist[x] < dist[y]; });
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += doc_labels[r.ranking[i]] == query_label;
  r.precision = static_cast<double>(hits) / static_cast<double>(k);
  return r;
}

Tensor uniform_frames(std::span<const Tensor> levels) {
  if (levels.empty()) throw std::invalid_argument("uniform_frames: no levels");
  Tensor out(levels.front().shape());
  const double w = 1.0 / static_cast<double>(levels.size());
  for (const Tensor& l : levels) kernels::active().axpy(w, l.ptr(), out.ptr(), out.numel());
  return out;
}

Tensor uniform_frames(const encoder::EncoderState& state, std::span<const float> samples) {
  return uniform_frames(encoder::encode_eval(state, samples));
}

double qbe_precision(const ActivationCache& cache, const corpus::LabeledCorpus& corpus, std::size_t k) {
  if (corpus.test.empty() || corpus.dev.empty()) throw std::invalid_argument("qbe_precision: empty split");
  std::vector<Tensor> docs;
  std::vector<int> labels;
  for (std::size_t idx : corpus.dev) {
    docs.push_back(uniform_frames(cache.at(idx)));
    labels.push_back(corpus::content_class(corpus.utterances[idx].spec));
  }
  double total = 0.0;
  for (std::size_t idx : corpus.test) {
    total += qbe_retrieve(uniform_frames(cache.at(idx)), corpus::content_class(corpus.utterances[idx].spec), docs,
                          labels, k)
                 .precision;
  }
  return total / static_cast<double>(corpus.test.size());
}

double qbe_precision(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus, std::size_t k) {
  std::vector<std::size_t> used = corpus.dev;
  used.insert(used.end(), corpus.test.begin(), corpus.test.end());
  return qbe_precision(encode_corpus(state, corpus, used), corpus, k);
}

}  // namespace rwl::probes
