#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "rwl/rewire.hpp"

using namespace rwl;
using namespace rwl::rewire;

namespace {

// Unit 2-vector at angle theta.
Tensor unit2(double theta) { return Tensor::vector({std::cos(theta), std::sin(theta)}); }

encoder::EncoderConfig tiny_encoder() {
  encoder::EncoderConfig c;
  c.n_layers = 1;
  c.feature_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.conv_channels = {4, 4};
  return c;
}

}  // namespace

TEST_CASE("strategy names round-trip") {
  for (PairStrategy s : kAllStrategies) CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS(parse_strategy("both"));
  CHECK(default_updates(PairStrategy::kTwin) == 400);
  CHECK(default_updates(PairStrategy::kNeutral) == 2800);
  CHECK(default_updates(PairStrategy::kMixed) == 1200);
}

TEST_CASE("mask_span") {
  std::vector<float> w(100, 0.5f);
  SUBCASE("marks ceil(pL) positions starting in the first (1-p)L") {
    std::size_t max_start = 0;
    for (std::uint64_t s = 0; s < 2000; ++s) {
      Rng rng = make_rng(s);
      Member m = mask_span(w, 0.2, rng);
      REQUIRE(m.mask.has_value());
      CHECK(m.mask->length == 20);
      CHECK(m.mask->start < 80);
      max_start = std::max(max_start, m.mask->start);
      const auto zeros = std::count(m.samples.begin(), m.samples.end(), 0.0f);
      CHECK(zeros == 20);
    }
    CHECK(max_start == 79);
  }
  SUBCASE("p = 0 leaves the waveform unchanged") {
    Rng rng = make_rng(1);
    Member m = mask_span(w, 0.0, rng);
    CHECK_FALSE(m.mask.has_value());
    CHECK(m.samples == w);
  }
  SUBCASE("same seed gives the same span") {
    Rng a = make_rng(77), b = make_rng(77);
    CHECK(mask_span(w, 0.2, a).mask == mask_span(w, 0.2, b).mask);
  }
  SUBCASE("p >= 1 is rejected") {
    Rng rng = make_rng(1);
    CHECK_THROWS(mask_span(w, 1.0, rng));
  }
}

TEST_CASE("truncate_long") {
  Rng rng = make_rng(3);
  std::vector<float> big(120000);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<float>(i);
  bool saw_first = false, saw_second = false;
  for (int k = 0; k < 40; ++k) {
    auto t = truncate_long(big, 90000, rng);
    REQUIRE(t.size() == 60000);
    (t.front() == 0.0f ? saw_first : saw_second) = true;
  }
  CHECK(saw_first);
  CHECK(saw_second);
  CHECK(truncate_long(std::vector<float>(90000), 90000, rng).size() == 90000);
  CHECK(truncate_long(std::vector<float>(10), 90000, rng).size() == 10);
  std::vector<float> odd(7, 1.0f);
  CHECK(take_half(odd, Half::kFirst).size() == 3);
  CHECK(take_half(odd, Half::kSecond).size() == 4);
  CHECK_THROWS(truncate_long(odd, 0, rng));
}

TEST_CASE("positives") {
  auto corpus = corpus::sample_corpus(20, {}, 5);
  RewireConfig cfg;
  const auto& u = corpus.utterances[0];

  SUBCASE("twin differs from the anchor only inside the mask") {
    Rng rng = make_rng(4);
    Member twin = build_positive(u.wave.samples, &u.spec, PositiveKind::kTwin, std::nullopt, cfg, rng);
    REQUIRE(twin.mask.has_value());
    for (std::size_t i = 0; i < twin.samples.size(); ++i) {
      const bool inside = i >= twin.mask->start && i < twin.mask->start + twin.mask->length;
      if (!inside) REQUIRE(twin.samples[i] == u.wave.samples[i]);
    }
  }
  SUBCASE("neutral positives of same-content anchors are identical") {
    corpus::UtteranceSpec other = u.spec;
    other.speaker_id = (other.speaker_id + 3) % 8;
    other.noise_level = 0.17;
    other.seed = 123456;
    Rng rng = make_rng(4);
    auto a = build_positive(u.wave.samples, &u.spec, PositiveKind::kNeutral, std::nullopt, cfg, rng);
    auto b = build_positive(corpus::render(other).samples, &other, PositiveKind::kNeutral, std::nullopt, cfg, rng);
    CHECK(a.samples == b.samples);
    CHECK_FALSE(a.mask.has_value());
    CHECK_THROWS(build_positive(u.wave.samples, nullptr, PositiveKind::kNeutral, std::nullopt, cfg, rng));
  }
  SUBCASE("neutral positive follows the anchor's truncation") {
    Rng rng = make_rng(4);
    auto n = build_positive(u.wave.samples, &u.spec, PositiveKind::kNeutral, Half::kSecond, cfg, rng);
    auto full = corpus::render_neutral(u.spec);
    CHECK(n.samples == take_half(full.samples, Half::kSecond));
  }
  SUBCASE("mixed picks twin half the time") {
    Rng rng = make_rng(2024);
    int twins = 0;
    for (int k = 0; k < 10000; ++k) twins += choose_positive_kind(PairStrategy::kMixed, rng) == PositiveKind::kTwin;
    CHECK(std::abs(twins / 10000.0 - 0.5) <= 0.02);
  }
}

TEST_CASE("negative sets") {
  auto corpus = corpus::sample_corpus(20, {}, 6);
  RewireConfig cfg;
  std::vector<std::size_t> ids{0, 1, 2};
  Rng rng = make_rng(8);

  auto twin = build_batch(corpus, ids, PairStrategy::kTwin, cfg, rng);
  auto n0 = build_negatives(twin, 0);
  CHECK(n0 == std::vector<MemberRef>{{Pool::kAnchor, 1}, {Pool::kAnchor, 2}, {Pool::kTwin, 1}, {Pool::kTwin, 2}});
  CHECK(std::find(n0.begin(), n0.end(), twin.positives[0]) == n0.end());

  auto mixed = build_batch(corpus, ids, PairStrategy::kMixed, cfg, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    auto n = build_negatives(mixed, i);
    CHECK(n.size() == 6);
    CHECK(std::find(n.begin(), n.end(), mixed.positives[i]) == n.end());
  }

  std::vector<std::size_t> eight{0, 1, 2, 3, 4, 5, 6, 7};
  CHECK(build_negatives(build_batch(corpus, eight, PairStrategy::kNeutral, cfg, rng), 3).size() == 14);
  CHECK(build_negatives(build_batch(corpus, eight, PairStrategy::kMixed, cfg, rng), 3).size() == 21);

  ContrastiveBatch single;
  single.anchors.resize(1);
  CHECK_THROWS(build_negatives(single, 0));
  std::vector<std::size_t> one{0};
  CHECK_THROWS(build_batch(corpus, one, PairStrategy::kTwin, cfg, rng));
}

TEST_CASE("infonce_loss") {
  Tape tape;
  SUBCASE("equal similarities give ln K") {
    Var a = tape.constant(unit2(0.0));
    Var p = tape.constant(unit2(1.0));
    std::vector<std::vector<Var>> negs{{tape.constant(unit2(-1.0)), tape.constant(unit2(1.0))}};
    Var loss = infonce_loss(std::vector<Var>{a}, std::vector<Var>{p}, negs, 0.04);
    CHECK(std::abs(loss.value().item() - std::log(3.0)) <= 1e-9);
  }
  SUBCASE("saturation") {
    Var a = tape.constant(unit2(0.0));
    Var p = tape.constant(unit2(0.0));
    std::vector<std::vector<Var>> negs{{tape.constant(unit2(std::numbers::pi)), tape.constant(unit2(std::numbers::pi))}};
    Var loss = infonce_loss(std::vector<Var>{a}, std::vector<Var>{p}, negs, 0.04);
    CHECK(loss.value().item() >= 0.0);
    CHECK(loss.value().item() < 1e-9);
  }
  SUBCASE("hand-set cosines match the scalar formula") {
    const double tau = 0.04;
    std::vector<Var> anchors, positives;
    std::vector<std::vector<Var>> negs;
    for (double base : {0.0, 0.7}) {
      anchors.push_back(tape.constant(unit2(base)));
      positives.push_back(tape.constant(unit2(base + std::acos(0.9))));
      negs.push_back({tape.constant(unit2(base - std::acos(0.1))), tape.constant(unit2(base + std::acos(0.2)))});
    }
    const double per = -std::log(std::exp(0.9 / tau) / (std::exp(0.9 / tau) + std::exp(0.1 / tau) + std::exp(0.2 / tau)));
    Var loss = infonce_loss(anchors, positives, negs, tau);
    CHECK(std::abs(loss.value().item() - 2.0 * per) <= 1e-10);
  }
  SUBCASE("invariant to positive rescaling") {
    Rng rng = make_rng(9);
    std::vector<Tensor> raw;
    for (int k = 0; k < 8; ++k) raw.push_back(testing::random_tensor({6}, rng));
    auto eval = [&](double s) {
      Tape t;
      std::vector<Var> v;
      for (auto& r : raw) v.push_back(scale(t.constant(r), s));
      std::vector<Var> anchors{v[0], v[1]}, positives{v[2], v[3]};
      std::vector<std::vector<Var>> negs{{v[4], v[5], v[1]}, {v[6], v[7], v[0]}};
      return infonce_loss(anchors, positives, negs, 0.04).value().item();
    };
    const double base = eval(1.0);
    CHECK(base > 0.0);
    for (double s : {1e-3, 0.5, 7.0, 1e4}) CHECK(std::abs(eval(s) - base) <= 1e-9);
  }
  SUBCASE("gradients match finite differences") {
    Rng rng = make_rng(10);
    std::vector<Tensor> inputs;
    for (int k = 0; k < 5; ++k) inputs.push_back(testing::random_tensor({4}, rng));
    double err = testing::gradient_check(
        [](Tape&, std::span<const Var> v) {
          std::vector<Var> anchors{v[0]}, positives{v[1]};
          std::vector<std::vector<Var>> negs{{v[2], v[3], v[4]}};
          return infonce_loss(anchors, positives, negs, 0.5);
        },
        inputs, 3);
    CHECK(err < 1e-6);
  }
  SUBCASE("errors") {
    Var z = tape.constant(Tensor::vector({0.0, 0.0}));
    Var a = tape.constant(unit2(0.0));
    std::vector<std::vector<Var>> negs{{a}};
    CHECK_THROWS_AS(infonce_loss(std::vector<Var>{z}, std::vector<Var>{a}, negs, 0.04), std::domain_error);
    CHECK_THROWS(infonce_loss(std::vector<Var>{a}, std::vector<Var>{a}, negs, 0.0));
  }
}

TEST_CASE("InfoNCE through the encoder matches finite differences") {
  auto state = encoder::initialize(tiny_encoder(), 12);
  auto corpus = corpus::sample_corpus(12, {}, 13);
  RewireConfig cfg;
  cfg.temperature = 0.5;
  Rng rng = make_rng(14);
  std::vector<std::size_t> ids{0, 1, 2};
  auto batch = build_batch(corpus, ids, PairStrategy::kMixed, cfg, rng);
  for (const char* name : {"conv1.weight", "layer0.attn.wv", "mask_embedding", "layer0.ln2.gamma"}) {
    CAPTURE(name);
    double err = testing::gradient_check(
        [&](Tape& t, std::span<const Var> in) {
          encoder::EncoderBinding enc(state, t, false);
          enc.set_param(name, in[0]);
          auto embed = [&](const Member& m) {
            return encoder::utterance_embedding(
                encoder::encode(enc, m.samples, encoder::Mode::kEval, nullptr, m.mask), 1);
          };
          std::vector<Var> anchors, positives;
          std::vector<std::vector<Var>> negs;
          for (std::size_t i = 0; i < batch.size(); ++i) {
            anchors.push_back(embed(batch.anchors[i]));
            positives.push_back(embed(batch.member(batch.positives[i])));
            std::vector<Var> n;
            for (auto r : build_negatives(batch, i)) n.push_back(embed(batch.member(r)));
            negs.push_back(std::move(n));
          }
          return infonce_loss(anchors, positives, negs, cfg.temperature);
        },
        {state.params.at(name)}, 15);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("rewire loop") {
  auto corpus = corpus::sample_corpus(40, {}, 16);
  auto state = encoder::initialize(tiny_encoder(), 17);
  RewireConfig cfg;
  cfg.batch_size = 4;

  SUBCASE("zero budget leaves the encoder unchanged") {
    cfg.updates = 0;
    auto r = rewire::rewire(state, corpus, PairStrategy::kMixed, cfg);
    for (auto& [name, t] : state.params) CHECK(r.state.params.at(name).bit_equal(t));
    CHECK(r.log.empty());
  }
  SUBCASE("deterministic, logs every step and restores the dropout setting") {
    cfg.updates = 6;
    std::size_t seen = 0;
    auto a = rewire::rewire(state, corpus, PairStrategy::kTwin, cfg, [&](const LogEntry& e) { CHECK(e.step == seen++); });
    auto b = rewire::rewire(state, corpus, PairStrategy::kTwin, cfg);
    CHECK(seen == 6);
    REQUIRE(a.log.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(a.log[i].loss == b.log[i].loss);
    for (auto& [name, t] : a.state.params) CHECK(b.state.params.at(name).bit_equal(t));
    CHECK(a.state.config == state.config);
    bool changed = false;
    for (auto& [name, t] : state.params) changed |= !a.state.params.at(name).bit_equal(t);
    CHECK(changed);
  }
  SUBCASE("invalid configs are rejected") {
    cfg.updates = 1;
    cfg.batch_size = 1;
    CHECK_THROWS(rewire::rewire(state, corpus, PairStrategy::kTwin, cfg));
    cfg.batch_size = 4;
    cfg.temperature = 0.0;
    CHECK_THROWS(rewire::rewire(state, corpus, PairStrategy::kTwin, cfg));
  }
}

TEST_CASE("mean_pair_cosine is bounded and deterministic") {
  auto corpus = corpus::sample_corpus(30, {}, 18);
  auto state = encoder::initialize(tiny_encoder(), 19);
  RewireConfig cfg;
  const double a = mean_pair_cosine(state, corpus, corpus.dev, PositiveKind::kTwin, cfg, 1);
  CHECK(a == mean_pair_cosine(state, corpus, corpus.dev, PositiveKind::kTwin, cfg, 1));
  CHECK(a <= 1.0);
  CHECK(a >= -1.0);
  CHECK_THROWS(mean_pair_cosine(state, corpus, {}, PositiveKind::kNeutral, cfg, 1));
}
