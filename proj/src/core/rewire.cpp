#include "rwl/rewire.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rwl/optim.hpp"

namespace rwl::rewire {

std::string_view to_string(PairStrategy s) {
  switch (s) {
    case PairStrategy::kTwin: return "twin";
    case PairStrategy::kNeutral: return "neutral";
    case PairStrategy::kMixed: return "mixed";
  }
  return "?";
}

PairStrategy parse_strategy(std::string_view name) {
  for (PairStrategy s : kAllStrategies)
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "' (expected twin, neutral or mixed)");
}

void RewireConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("rewire config: temperature must be positive");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0))
    throw std::invalid_argument("rewire config: mask_fraction must lie in [0, 1)");
  if (batch_size < 2) throw std::invalid_argument("rewire config: batch_size must be at least 2");
  if (length_threshold == 0) throw std::invalid_argument("rewire config: length_threshold must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("rewire config: dropout must lie in [0, 1)");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("rewire config: learning_rate must be positive");
}

std::size_t default_updates(PairStrategy s) {
  switch (s) {
    case PairStrategy::kTwin: return 400;
    case PairStrategy::kNeutral: return 2800;
    case PairStrategy::kMixed: return 1200;
  }
  return 0;
}

Member mask_span(std::span<const float> w, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("mask_span: p must lie in [0, 1)");
  Member m{{w.begin(), w.end()}, std::nullopt};
  if (p == 0.0) return m;
  if (w.empty()) throw std::invalid_argument("mask_span: empty waveform");
  constexpr double kEps = 1e-9;
  const double L = static_cast<double>(w.size());
  const auto length = static_cast<std::size_t>(std::ceil(p * L - kEps));
  const auto starts = static_cast<std::size_t>(std::ceil((1.0 - p) * L - kEps));
  const std::size_t start = starts == 0 ? 0 : uniform_index(rng, starts);
  std::fill_n(m.samples.begin() + static_cast<std::ptrdiff_t>(start), length, 0.0f);
  m.mask = encoder::SampleSpan{start, length};
  return m;
}

std::optional<Half> choose_half(std::size_t length, std::size_t threshold, Rng& rng) {
  if (length <= threshold) return std::nullopt;
  return std::bernoulli_distribution(0.5)(rng) ? Half::kSecond : Half::kFirst;
}

std::vector<float> take_half(std::span<const float> w, std::optional<Half> half) {
  if (!half) return {w.begin(), w.end()};
  const std::size_t mid = w.size() / 2;
  return *half == Half::kFirst ? std::vector<float>(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(mid))
                               : std::vector<float>(w.begin() + static_cast<std::ptrdiff_t>(mid), w.end());
}

std::vector<float> truncate_long(std::span<const float> w, std::size_t threshold, Rng& rng) {
  if (threshold == 0) throw std::invalid_argument("truncate_long: threshold must be positive");
  return take_half(w, choose_half(w.size(), threshold, rng));
}

PositiveKind choose_positive_kind(PairStrategy s, Rng& rng) {
  switch (s) {
    case PairStrategy::kTwin: return PositiveKind::kTwin;
    case PairStrategy::kNeutral: return PositiveKind::kNeutral;
    case PairStrategy::kMixed:
      return std::bernoulli_distribution(0.5)(rng) ? PositiveKind::kTwin : PositiveKind::kNeutral;
  }
  return PositiveKind::kTwin;
}

Member build_positive(std::span<const float> anchor, const corpus::UtteranceSpec* spec, PositiveKind kind,
                      std::optional<Half> half, const RewireConfig& config, Rng& rng,
                      const corpus::GeneratorConfig& generator) {
  if (kind == PositiveKind::kTwin) return mask_span(anchor, config.mask_fraction, rng);
  if (spec == nullptr) throw std::invalid_argument("build_positive: neutral positive needs the utterance spec");
  const corpus::Waveform neutral = corpus::render_neutral(*spec, generator);
  return Member{take_half(neutral.samples, half), std::nullopt};
}

const Member& ContrastiveBatch::member(MemberRef r) const {
  const std::vector<Member>& pool = r.pool == Pool::kAnchor ? anchors : r.pool == Pool::kTwin ? twins : neutrals;
  if (r.index >= pool.size()) throw std::out_of_range("ContrastiveBatch: member index out of range");
  return pool[r.index];
}

ContrastiveBatch build_batch(const corpus::LabeledCorpus& corpus, std::span<const std::size_t> utterances,
                             PairStrategy strategy, const RewireConfig& config, Rng& rng) {
  if (utterances.size() < 2) throw std::invalid_argument("build_batch: a batch needs at least 2 anchors");
  ContrastiveBatch batch;
  batch.strategy = strategy;
  batch.utterances.assign(utterances.begin(), utterances.end());
  const bool twins = strategy != PairStrategy::kNeutral;
  const bool neutrals = strategy != PairStrategy::kTwin;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const corpus::Utterance& u = corpus.utterances.at(utterances[i]);
    const std::optional<Half> half = choose_half(u.wave.size(), config.length_threshold, rng);
    Member anchor{take_half(u.wave.samples, half), std::nullopt};
    const PositiveKind kind = choose_positive_kind(strategy, rng);
    if (twins) batch.twins.push_back(build_positive(anchor.samples, &u.spec, PositiveKind::kTwin, half, config, rng,
                                                    corpus.config));
    if (neutrals)
      batch.neutrals.push_back(
          build_positive(anchor.samples, &u.spec, PositiveKind::kNeutral, half, config, rng, corpus.config));
    batch.positives.push_back({kind == PositiveKind::kTwin ? Pool::kTwin : Pool::kNeutral, i});
    batch.anchors.push_back(std::move(anchor));
  }
  return batch;
}

std::vector<MemberRef> build_negatives(const ContrastiveBatch& batch, std::size_t i) {
  const std::size_t b = batch.size();
  if (b < 2) throw std::invalid_argument("build_negatives: batch of " + std::to_string(b) + " has no negatives");
  if (i >= b) throw std::out_of_range("build_negatives: anchor index out of range");
  std::vector<MemberRef> out;
  auto add_pool = [&](Pool pool) {
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) out.push_back({pool, j});
  };
  add_pool(Pool::kAnchor);
  if (!batch.twins.empty()) add_pool(Pool::kTwin);
  if (!batch.neutrals.empty()) add_pool(Pool::kNeutral);
  return out;
}

Var infonce_loss(std::span<const Var> anchors, std::span<const Var> positives,
                 std::span<const std::vector<Var>> negatives, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("infonce_loss: temperature must be positive");
  if (anchors.empty()) throw std::invalid_argument("infonce_loss: no anchors");
  if (positives.size() != anchors.size() || negatives.size() != anchors.size())
    throw std::invalid_argument("infonce_loss: anchors, positives and negative sets differ in count");
  const double inv_t = 1.0 / temperature;
  std::vector<Var> terms;
  terms.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    // Candidate 0 is the positive.
    std::vector<Var> sims;
    sims.reserve(negatives[i].size() + 1);
    sims.push_back(cosine_similarity(anchors[i], positives[i]));
    for (const Var& n : negatives[i]) sims.push_back(cosine_similarity(anchors[i], n));
    Var logits = scale(stack(sims), inv_t);
    terms.push_back(sub(logsumexp(logits), index(logits, 0)));
  }
  return terms.size() == 1 ? terms.front() : sum(stack(terms));
}

namespace {

std::vector<std::size_t> draw_distinct(std::span<const std::size_t> pool, std::size_t k, Rng& rng) {
  std::vector<std::size_t> picks;
  picks.reserve(k);
  while (picks.size() < k) {
    const std::size_t idx = pool[uniform_index(rng, pool.size())];
    if (std::find(picks.begin(), picks.end(), idx) == picks.end()) picks.push_back(idx);
  }
  return picks;
}

std::size_t pooling_level(const RewireConfig& config, const encoder::EncoderConfig& enc) {
  const std::size_t level = config.pooling_level.value_or(enc.n_layers);
  if (level > enc.n_layers) throw std::out_of_range("rewire: pooling level beyond the top layer");
  return level;
}

}  // namespace

RewireResult rewire(const encoder::EncoderState& initial, const corpus::LabeledCorpus& corpus, PairStrategy strategy,
                    const RewireConfig& config, const StepCallback& on_step) {
  config.validate();
  RewireResult result{initial, {}};
  if (config.updates == 0) return result;
  if (corpus.train.size() < config.batch_size)
    throw std::invalid_argument("rewire: training split smaller than the batch size");
  const std::size_t level = pooling_level(config, initial.config);

  encoder::EncoderState& state = result.state;
  const double pretrain_dropout = state.config.dropout;
  state.config.dropout = config.dropout;

  std::vector<Tensor*> params;
  for (auto& [name, t] : state.params) params.push_back(&t);
  Adam adam(AdamConfig{config.learning_rate});
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t stream = mix_seed(static_cast<std::uint64_t>(strategy), 0x5EED);

  for (std::size_t step = 0; step < config.updates; ++step) {
    Rng rng = make_rng(config.seed, mix_seed(stream, step));
    const ContrastiveBatch batch =
        build_batch(corpus, draw_distinct(corpus.train, config.batch_size, rng), strategy, config, rng);

    Tape tape;
    encoder::EncoderBinding enc(state, tape, true);
    std::uint64_t member_id = 0;
    auto embed_pool = [&](const std::vector<Member>& pool) {
      std::vector<Var> out;
      for (const Member& m : pool) {
        Rng drop = make_rng(config.seed, mix_seed(mix_seed(stream, step), ++member_id));
        out.push_back(encoder::utterance_embedding(
            encoder::encode(enc, m.samples, encoder::Mode::kTrain, &drop, m.mask), level));
      }
      return out;
    };
    const std::vector<Var> anchors = embed_pool(batch.anchors);
    const std::vector<Var> twins = embed_pool(batch.twins);
    const std::vector<Var> neutrals = embed_pool(batch.neutrals);
    auto lookup = [&](MemberRef r) {
      return r.pool == Pool::kAnchor ? anchors[r.index] : r.pool == Pool::kTwin ? twins[r.index] : neutrals[r.index];
    };
    std::vector<Var> positives;
    std::vector<std::vector<Var>> negatives;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      positives.push_back(lookup(batch.positives[i]));
      std::vector<Var> neg;
      for (MemberRef r : build_negatives(batch, i)) neg.push_back(lookup(r));
      negatives.push_back(std::move(neg));
    }
    Var loss = infonce_loss(anchors, positives, negatives, config.temperature);
    const double value = loss.value().item();
    if (!std::isfinite(value))
      throw std::runtime_error("rewire(" + std::string(to_string(strategy)) + "): non-finite loss " +
                               std::to_string(value) + " at step " + std::to_string(step));
    Gradients g = tape.backward(loss);
    encoder::ParameterMap grads = enc.gradients(g);
    std::vector<const Tensor*> gp;
    for (auto& [name, t] : grads) gp.push_back(&t);
    adam.step(params, gp);

    LogEntry entry{step, value,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.log.push_back(entry);
    if (on_step) on_step(entry);
  }
  state.config.dropout = pretrain_dropout;
  return result;
}

double mean_pair_cosine(const encoder::EncoderState& state, const corpus::LabeledCorpus& corpus,
                        std::span<const std::size_t> indices, PositiveKind kind, const RewireConfig& config,
                        std::uint64_t seed) {
  if (indices.empty()) throw std::invalid_argument("mean_pair_cosine: no utterances");
  const std::size_t level = pooling_level(config, state.config);
  double total = 0.0;
  for (std::size_t idx : indices) {
    const corpus::Utterance& u = corpus.utterances.at(idx);
    Rng rng = make_rng(seed, idx);
    const Member pos = build_positive(u.wave.samples, &u.spec, kind, std::nullopt, config, rng, corpus.config);
    Tape tape;
    encoder::EncoderBinding enc(state, tape, false);
    Var a = encoder::utterance_embedding(encoder::encode(enc, u.wave.samples, encoder::Mode::kEval), level);
    Var b = encoder::utterance_embedding(
        encoder::encode(enc, pos.samples, encoder::Mode::kEval, nullptr, pos.mask), level);
    total += cosine_similarity(a, b).value().item();
  }
  return total / static_cast<double>(indices.size());
}

}  // namespace rwl::rewire
