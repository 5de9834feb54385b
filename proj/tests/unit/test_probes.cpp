#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "doctest.h"
#include "dtw_oracle.hpp"
#include "gradcheck.hpp"
#include "rwl/probes.hpp"
#include "rwl/random.hpp"

using namespace rwl;
using namespace rwl::probes;

namespace {

// Two linearly separable classes, one-level features.
FeatureSet toy_separable(std::size_t n, std::uint64_t seed) {
  FeatureSet fs;
  fs.task = {TaskKind::kContentCls, Metric::kAccuracy, 2};
  fs.levels = 1;
  fs.dim = 3;
  Rng rng = make_rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % 2;
    Tensor t(Shape{1, 3});
    t.at(0, 0) = (cls ? 1.0 : -1.0) + 0.3 * uniform(rng, -1, 1);
    t.at(0, 1) = uniform(rng, -1, 1);
    t.at(0, 2) = uniform(rng, -1, 1);
    fs.items.push_back(t);
    fs.labels.push_back({cls});
  }
  return fs;
}

}  // namespace

TEST_CASE("task names and specs") {
  for (TaskKind k : kTrainableTasks) CHECK(parse_task(to_string(k)) == k);
  CHECK(parse_task("qbe") == TaskKind::kQbe);
  CHECK_THROWS(parse_task("asr"));
  CHECK(TaskSpec::make(TaskKind::kIntentCls).n_classes == 8);
  CHECK(TaskSpec::make(TaskKind::kFrameLabeling).metric == Metric::kFrameF1);
  CHECK_FALSE(TaskSpec::make(TaskKind::kQbe).trainable());
}

TEST_CASE("fit_probe on separable toy features") {
  auto train = toy_separable(60, 1), dev = toy_separable(40, 2), test = toy_separable(40, 3);
  ProbeConfig cfg;
  cfg.budget = 500;
  auto r = fit_probe(train, dev, test, cfg);
  CHECK(r.record.best_dev == 1.0);
  CHECK(r.record.steps_to_best <= 500);
  CHECK(r.record.test_at_best > 0.9);
  const double at_best = std::find_if(r.record.curve.begin(), r.record.curve.end(), [&](auto& p) {
                           return p.first == r.record.steps_to_best;
                         })->second;
  CHECK(at_best == r.record.best_dev);
  for (auto& [step, metric] : r.record.curve) CHECK(metric <= r.record.best_dev);
  CHECK(r.record.curve.back().first == 500);
  CHECK(first_step_reaching(r.record, 1.0) == r.record.steps_to_best);

  auto again = fit_probe(train, dev, test, cfg);
  CHECK(again.record.curve == r.record.curve);
  CHECK(again.record.steps_to_best == r.record.steps_to_best);

  cfg.budget = 0;
  auto zero = fit_probe(train, dev, test, cfg);
  CHECK(zero.record.steps_to_best == 0);
  CHECK(zero.record.curve.size() == 1);
  auto init = ProbeHead::initialize(1, 3, 2, cfg.seed);
  CHECK(zero.record.best_dev == evaluate(init, dev));

  FeatureSet empty = train;
  empty.items.clear();
  empty.labels.clear();
  CHECK_THROWS(fit_probe(empty, dev, test, cfg));
}

TEST_CASE("evaluate_classification") {
  FeatureSet fs;
  fs.task = {TaskKind::kIntentCls, Metric::kAccuracy, 8};
  fs.levels = 1;
  fs.dim = 2;
  for (std::size_t i = 0; i < 64; ++i) {
    fs.items.push_back(Tensor::matrix(1, 2, {1.0, double(i % 8)}));
    fs.labels.push_back({i % 8});
  }
  ProbeHead head = ProbeHead::initialize(1, 2, 8, 1);
  std::fill(head.weight.data().begin(), head.weight.data().end(), 0.0);
  head.bias[3] = 1.0;  // always predicts class 3
  CHECK(evaluate_classification(head, fs) == doctest::Approx(0.125));

  // Recount against a hand-rolled confusion matrix on 50 items.
  Rng rng = make_rng(4);
  FeatureSet r;
  r.task = {TaskKind::kSpeakerCls, Metric::kAccuracy, 4};
  r.levels = 2;
  r.dim = 3;
  for (int i = 0; i < 50; ++i) {
    r.items.push_back(testing::random_tensor({2, 3}, rng));
    r.labels.push_back({uniform_index(rng, 4)});
  }
  ProbeHead h = ProbeHead::initialize(2, 3, 4, 9);
  h.layer_logits[0] = 0.4;
  auto pred = predict(h, r);
  std::size_t confusion[4][4] = {};
  for (int i = 0; i < 50; ++i) ++confusion[r.labels[i][0]][pred[i]];
  std::size_t diag = 0;
  for (int c = 0; c < 4; ++c) diag += confusion[c][c];
  CHECK(evaluate_classification(h, r) == doctest::Approx(double(diag) / 50.0).epsilon(1e-15));

  FeatureSet empty = r;
  empty.items.clear();
  CHECK_THROWS(evaluate_classification(h, empty));
}

TEST_CASE("frame_label_f1") {
  std::vector<std::size_t> gold{0, 0, 1}, pred{0, 1, 1};
  // class a: P=1, R=1/2 -> 2/3; class b: P=1/2, R=1 -> 2/3
  CHECK(frame_label_f1(pred, gold) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(frame_label_f1(gold, gold) == 1.0);
  CHECK(frame_label_f1(std::vector<std::size_t>{2, 2, 3}, gold) == 0.0);
  CHECK_THROWS(frame_label_f1(std::vector<std::size_t>{0}, gold));
}

TEST_CASE("cost units are exact for cosine distances") {
  Rng rng = make_rng(11);
  for (int i = 0; i < 1000; ++i) {
    Tensor a = testing::random_tensor({1, 3}, rng), b = testing::random_tensor({1, 3}, rng);
    const double c = cosine_distance(a.row(0), b.row(0));
    CHECK(std::ldexp(static_cast<double>(cost_units(c)), -kCostFractionBits) == c);
  }
}

TEST_CASE("dtw_distance") {
  Tensor a = Tensor::matrix(1, 2, {1, 0});
  Tensor b = Tensor::matrix(3, 2, {1, 0, 1, 0, 1, 0});
  CHECK(dtw_distance(a, b) == 0.0);
  Rng rng = make_rng(5);
  Tensor x = testing::random_tensor({5, 4}, rng);
  CHECK(dtw_distance(x, x) == 0.0);
  CHECK_THROWS(dtw_distance(Tensor(Shape{0, 2}), a));
  CHECK_THROWS(dtw_distance(Tensor::matrix(1, 2, {0, 0}), a));
}

TEST_CASE("dtw equals exhaustive path enumeration and is symmetric") {
  Rng rng = make_rng(6);
  for (int c = 0; c < 500; ++c) {
    const std::size_t n = 1 + uniform_index(rng, 6), m = 1 + uniform_index(rng, 6), d = 1 + uniform_index(rng, 4);
    Tensor a = testing::random_tensor({n, d}, rng), b = testing::random_tensor({m, d}, rng);
    Tensor costs(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) costs.at(i, j) = cosine_distance(a.row(i), b.row(j));
    REQUIRE(dtw_distance(a, b) == testing::dtw_brute_force(costs));
    REQUIRE(dtw_distance(a, b) == dtw_distance(b, a));
  }
}

TEST_CASE("qbe_retrieve") {
  Rng rng = make_rng(7);
  std::vector<Tensor> docs;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) {
    docs.push_back(testing::random_tensor({3 + uniform_index(rng, 4), 5}, rng));
    labels.push_back(i % 3);
  }
  auto r = qbe_retrieve(docs[7], labels[7], docs, labels, 3);
  CHECK(r.ranking.front() == 7);
  auto all = qbe_retrieve(docs[4], labels[4], docs, labels, 12);
  CHECK(all.precision == doctest::Approx(4.0 / 12.0));
  CHECK_THROWS(qbe_retrieve(docs[0], 0, docs, labels, 13));
  CHECK_THROWS(qbe_retrieve(docs[0], 0, docs, labels, 0));
}

TEST_CASE("probes on a real encoder leave it untouched") {
  encoder::EncoderConfig ec;
  ec.n_layers = 1;
  ec.feature_dim = 8;
  ec.n_heads = 2;
  ec.ffn_dim = 16;
  ec.conv_channels = {4, 4};
  auto state = encoder::initialize(ec, 3);
  const auto before = state.params;
  auto corpus = corpus::sample_corpus(40, {}, 8);
  ProbeConfig cfg;
  cfg.budget = 50;
  for (TaskKind k : kTrainableTasks) {
    CAPTURE(to_string(k));
    auto r = fit_probe(state, TaskSpec::make(k), corpus, cfg);
    CHECK(r.record.best_dev >= 0.0);
    CHECK(r.record.best_dev <= 1.0);
    CHECK(r.head.layer_logits.numel() == 2);
  }
  for (auto& [name, t] : before) CHECK(state.params.at(name).bit_equal(t));
  auto frames = extract_features(state, corpus, corpus.dev, TaskSpec::make(TaskKind::kFrameLabeling));
  CHECK(frames.labels[0].size() == frames.frames(0));
  const double p = qbe_precision(state, corpus, 1);
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
}
