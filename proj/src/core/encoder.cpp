#include "rwl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "rwl/optim.hpp"

namespace rwl::encoder {

void EncoderConfig::validate() const {
  if (conv_strides.empty()) throw std::invalid_argument("encoder config: at least one conv layer required");
  if (conv_channels.size() + 1 != conv_strides.size())
    throw std::invalid_argument("encoder config: conv_channels must have one entry fewer than conv_strides");
  for (std::size_t s : conv_strides)
    if (s == 0) throw std::invalid_argument("encoder config: conv strides must be positive");
  if (feature_dim == 0 || n_heads == 0 || feature_dim % n_heads != 0)
    throw std::invalid_argument("encoder config: feature_dim must be divisible by n_heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("encoder config: dropout must lie in [0, 1)");
}

std::size_t EncoderConfig::receptive_field() const {
  return std::accumulate(conv_strides.begin(), conv_strides.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t EncoderConfig::frame_count(std::size_t samples) const {
  std::size_t t = samples;
  for (std::size_t s : conv_strides) t /= s;
  return t;
}

std::map<std::string, Shape> parameter_shapes(const EncoderConfig& c) {
  c.validate();
  std::map<std::string, Shape> shapes;
  std::size_t c_in = 1;
  for (std::size_t i = 0; i < c.conv_strides.size(); ++i) {
    const std::size_t c_out = i + 1 < c.conv_strides.size() ? c.conv_channels[i] : c.feature_dim;
    const std::string p = "conv" + std::to_string(i);
    shapes[p + ".weight"] = {c.conv_strides[i] * c_in, c_out};
    shapes[p + ".bias"] = {c_out};
    c_in = c_out;
  }
  const std::size_t d = c.feature_dim;
  shapes["feature_norm.gamma"] = {d};
  shapes["feature_norm.beta"] = {d};
  shapes["mask_embedding"] = {d};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) shapes[p + w] = {d, d};
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) shapes[p + b] = {d};
    shapes[p + "ln1.gamma"] = {d};
    shapes[p + "ln1.beta"] = {d};
    shapes[p + "ffn.w1"] = {d, c.ffn_dim};
    shapes[p + "ffn.b1"] = {c.ffn_dim};
    shapes[p + "ffn.w2"] = {c.ffn_dim, d};
    shapes[p + "ffn.b2"] = {d};
    shapes[p + "ln2.gamma"] = {d};
    shapes[p + "ln2.beta"] = {d};
  }
  shapes["recon.weight"] = {d, c.receptive_field()};
  shapes["recon.bias"] = {c.receptive_field()};
  return shapes;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

EncoderState initialize(const EncoderConfig& config, std::uint64_t seed) {
  EncoderState state;
  state.config = config;
  state.rng_seed = seed;
  Rng rng = make_rng(seed, 0x1417);
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    if (ends_with(name, ".gamma")) {
      std::fill(t.data().begin(), t.data().end(), 1.0);
    } else if (shape.size() == 2 || name == "mask_embedding") {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.data()) v = u(rng);
    }
    state.params.emplace(name, std::move(t));
  }
  return state;
}

std::vector<bool> frames_overlapping(const SampleSpan& span, std::size_t frame_count, std::size_t receptive_field) {
  std::vector<bool> mask(frame_count, false);
  if (span.length == 0) return mask;
  const std::size_t first = span.start / receptive_field;
  const std::size_t last = (span.start + span.length - 1) / receptive_field;
  for (std::size_t f = first; f <= last && f < frame_count; ++f) mask[f] = true;
  return mask;
}

EncoderBinding::EncoderBinding(const EncoderState& state, Tape& tape, bool trainable)
    : config_(state.config), tape_(&tape) {
  for (const auto& [name, t] : state.params) vars_.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
}

Var EncoderBinding::param(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("encoder has no parameter " + name);
  return it->second;
}

void EncoderBinding::set_param(const std::string& name, Var value) {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("encoder has no parameter " + name);
  tape_->check_owned(value, "set_param");
  if (value.value().shape() != it->second.value().shape())
    throw ShapeError("set_param " + name + ": expected " + shape_to_string(it->second.value().shape()) + ", got " +
                     shape_to_string(value.value().shape()));
  it->second = value;
}

ParameterMap EncoderBinding::gradients(const Gradients& grads) const {
  ParameterMap out;
  for (const auto& [name, v] : vars_) out.emplace(name, grads[v]);
  return out;
}

namespace {

Tensor positional_encoding(std::size_t frames, std::size_t d) {
  Tensor pe(Shape{frames, d});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe.at(t, i) = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) pe.at(t, i + 1) = std::cos(static_cast<double>(t) * freq);
    }
  return pe;
}

Var maybe_dropout(Var x, Mode mode, Rng* rng, double rate) {
  if (mode != Mode::kTrain || rate == 0.0) return x;
  return dropout(x, 1.0 - rate, *rng);
}

Var linear(const EncoderBinding& enc, Var x, const std::string& w, const std::string& b) {
  return add_row(matmul(x, enc.param(w)), enc.param(b));
}

}  // namespace

Var extract_features(const EncoderBinding& enc, std::span<const float> samples) {
  const EncoderConfig& c = enc.config();
  if (samples.size() < c.receptive_field())
    throw std::invalid_argument("extract_features: waveform of " + std::to_string(samples.size()) +
                                " samples is shorter than the receptive field of " +
                                std::to_string(c.receptive_field()));
  // Only the samples covered by whole frames reach the conv stack.
  const std::size_t used = c.frame_count(samples.size()) * c.receptive_field();
  std::vector<double> raw(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(used));
  Var h = enc.tape().constant(Tensor(Shape{used, 1}, std::move(raw)));
  for (std::size_t i = 0; i < c.conv_strides.size(); ++i) {
    const std::string p = "conv" + std::to_string(i);
    h = strided_conv1d(h, enc.param(p + ".weight"), enc.param(p + ".bias"), c.conv_strides[i]);
    if (i + 1 < c.conv_strides.size()) h = gelu(h);
  }
  return layernorm(h, enc.param("feature_norm.gamma"), enc.param("feature_norm.beta"));
}

namespace {

// Transformer stack over feature-extractor output; frames flagged in
// `frame_mask` take the mask embedding first.
LayerActivations run_stack(const EncoderBinding& enc, Var features, const std::vector<bool>& frame_mask, Mode mode,
                           Rng* rng) {
  const EncoderConfig& c = enc.config();
  if (mode == Mode::kTrain && c.dropout > 0.0 && rng == nullptr)
    throw std::invalid_argument("encode: train mode needs an rng stream");
  Tape& tape = enc.tape();
  LayerActivations acts;
  acts.levels.push_back(features);
  const std::size_t m = features.value().rows();
  const std::size_t d = c.feature_dim;
  const std::size_t dh = d / c.n_heads;

  Var h = features;
  if (std::find(frame_mask.begin(), frame_mask.end(), true) != frame_mask.end())
    h = mask_rows(h, enc.param("mask_embedding"), frame_mask);
  h = add(h, tape.constant(positional_encoding(m, d)));
  h = maybe_dropout(h, mode, rng, c.dropout);

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Var q = linear(enc, h, p + "attn.wq", p + "attn.bq");
    Var k = linear(enc, h, p + "attn.wk", p + "attn.bk");
    Var v = linear(enc, h, p + "attn.wv", p + "attn.bv");
    std::vector<Var> heads;
    heads.reserve(c.n_heads);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, dh);
      Var kh = slice_cols(k, hd * dh, dh);
      Var vh = slice_cols(v, hd * dh, dh);
      Var probs = softmax(scale(matmul_nt(qh, kh), inv_sqrt_dh));
      probs = maybe_dropout(probs, mode, rng, c.dropout);
      heads.push_back(matmul(probs, vh));
    }
    Var attn = heads.size() == 1 ? heads.front() : concat_cols(heads);
    Var out = maybe_dropout(linear(enc, attn, p + "attn.wo", p + "attn.bo"), mode, rng, c.dropout);
    h = layernorm(add(h, out), enc.param(p + "ln1.gamma"), enc.param(p + "ln1.beta"));
    Var ff = linear(enc, gelu(linear(enc, h, p + "ffn.w1", p + "ffn.b1")), p + "ffn.w2", p + "ffn.b2");
    ff = maybe_dropout(ff, mode, rng, c.dropout);
    h = layernorm(add(h, ff), enc.param(p + "ln2.gamma"), enc.param(p + "ln2.beta"));
    acts.levels.push_back(h);
  }
  return acts;
}

}  // namespace

LayerActivations encode(const EncoderBinding& enc, std::span<const float> samples, Mode mode, Rng* rng,
                        const std::optional<SampleSpan>& mask) {
  Var features = extract_features(enc, samples);
  const std::size_t m = features.value().rows();
  std::vector<bool> frame_mask =
      mask ? frames_overlapping(*mask, m, enc.config().receptive_field()) : std::vector<bool>(m, false);
  return run_stack(enc, features, frame_mask, mode, rng);
}

std::vector<Tensor> encode_eval(const EncoderState& state, std::span<const float> samples) {
  Tape tape;
  EncoderBinding enc(state, tape, false);
  LayerActivations acts = encode(enc, samples, Mode::kEval);
  std::vector<Tensor> out;
  out.reserve(acts.levels.size());
  for (const Var& v : acts.levels) out.push_back(v.value());
  return out;
}

Var utterance_embedding(const LayerActivations& acts, std::size_t level) {
  if (level >= acts.levels.size())
    throw std::out_of_range("utterance_embedding: level " + std::to_string(level) + " out of range");
  return mean_over_axis(acts.levels[level], 0);
}

Tensor utterance_embedding(std::span<const Tensor> levels, std::size_t level) {
  if (level >= levels.size())
    throw std::out_of_range("utterance_embedding: level " + std::to_string(level) + " out of range");
  Tape tape;
  return mean_over_axis(tape.constant(levels[level]), 0).value();
}

Var weighted_layer_sum(const LayerActivations& acts, Var logits) {
  if (logits.value().rank() != 1 || logits.value().numel() != acts.levels.size())
    throw ShapeError("weighted_layer_sum: " + std::to_string(acts.levels.size()) + " levels but logits of shape " +
                     shape_to_string(logits.value().shape()));
  return weighted_sum(acts.levels, softmax(logits));
}

// ---------------------------------------------------------------------------
// Masked-frame reconstruction pretraining

std::string_view to_string(ReconTarget t) { return t == ReconTarget::kSamples ? "samples" : "spectrum"; }

ReconTarget parse_recon_target(std::string_view name) {
  if (name == "samples") return ReconTarget::kSamples;
  if (name == "spectrum") return ReconTarget::kSpectrum;
  throw std::invalid_argument("unknown reconstruction target '" + std::string(name) + "'");
}

std::vector<double> recon_target(std::span<const float> frame, ReconTarget target) {
  const std::size_t n = frame.size();
  std::vector<double> out(n);
  if (target == ReconTarget::kSamples) {
    std::copy(frame.begin(), frame.end(), out.begin());
    return out;
  }
  // |DFT| / sqrt(n) over all n bins, which keeps the frame's energy. Bins k
  // and n-k coincide.
  for (std::size_t k = 0; k < n; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>((k * j) % n) / static_cast<double>(n);
      re += frame[j] * std::cos(a);
      im -= frame[j] * std::sin(a);
    }
    out[k] = std::hypot(re, im) / std::sqrt(static_cast<double>(n));
  }
  return out;
}

namespace {

struct ReconSample {
  std::vector<float> samples;
  std::vector<bool> frame_mask;
  ReconTarget target = ReconTarget::kSamples;
};

ReconSample make_recon_sample(std::span<const float> wave, const EncoderConfig& c, const PretrainConfig& pc,
                              Rng& rng) {
  ReconSample s;
  if (wave.size() > pc.length_threshold) {
    const std::size_t half = wave.size() / 2;
    const bool second = std::bernoulli_distribution(0.5)(rng);
    s.samples.assign(wave.begin() + static_cast<std::ptrdiff_t>(second ? half : 0),
                     second ? wave.end() : wave.begin() + static_cast<std::ptrdiff_t>(half));
  } else {
    s.samples.assign(wave.begin(), wave.end());
  }
  const std::size_t m = c.frame_count(s.samples.size());
  const auto k = static_cast<std::size_t>(std::ceil(pc.mask_fraction * static_cast<double>(m) - 1e-9));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  s.frame_mask.assign(m, false);
  for (std::size_t i = 0; i < std::min(k, m); ++i) s.frame_mask[order[i]] = true;
  s.target = pc.target;
  return s;
}

Var recon_loss(const EncoderBinding& enc, const ReconSample& s, Mode mode, Rng* rng) {
  const std::size_t rf = enc.config().receptive_field();
  Tape& tape = enc.tape();
  LayerActivations acts = run_stack(enc, extract_features(enc, s.samples), s.frame_mask, mode, rng);
  const std::size_t m = acts.frames();
  Var pred = linear(enc, acts.levels.back(), "recon.weight", "recon.bias");
  // Unmasked rows get zero weight.
  Tensor target(Shape{m, rf});
  Tensor weight(Shape{m, rf});
  std::size_t masked = 0;
  for (std::size_t f = 0; f < m; ++f) {
    const std::vector<double> t = recon_target(std::span(s.samples).subspan(f * rf, rf), s.target);
    std::copy(t.begin(), t.end(), target.ptr() + f * rf);
    if (s.frame_mask[f]) {
      ++masked;
      for (std::size_t j = 0; j < rf; ++j) weight.at(f, j) = 1.0;
    }
  }
  Var diff = mul(sub(pred, tape.constant(std::move(target))), tape.constant(std::move(weight)));
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, masked) * rf);
  return scale(sum(mul(diff, diff)), norm);
}

}  // namespace

PretrainResult pretrain_base(const EncoderState& initial, const corpus::LabeledCorpus& corpus,
                             const PretrainConfig& config) {
  if (corpus.train.empty()) throw std::invalid_argument("pretrain_base: empty corpus");
  PretrainResult result{initial, {}};
  if (config.steps == 0) return result;
  EncoderState& state = result.state;
  Adam adam(AdamConfig{config.learning_rate});
  Rng rng = make_rng(config.seed, 0xBA5E);
  std::vector<Tensor*> params;
  for (auto& [name, t] : state.params) params.push_back(&t);

  for (std::size_t step = 0; step < config.steps; ++step) {
    Tape tape;
    EncoderBinding enc(state, tape, true);
    std::vector<Var> losses;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t idx = corpus.train[uniform_index(rng, corpus.train.size())];
      ReconSample s = make_recon_sample(corpus.utterances[idx].wave.samples, state.config, config, rng);
      Rng drop = make_rng(config.seed, mix_seed(step, b));
      losses.push_back(recon_loss(enc, s, Mode::kTrain, &drop));
    }
    Var loss = scale(sum(stack(losses)), 1.0 / static_cast<double>(losses.size()));
    const double value = loss.value().item();
    if (!std::isfinite(value))
      throw std::runtime_error("pretrain_base: non-finite loss at step " + std::to_string(step));
    result.losses.push_back(value);
    Gradients g = tape.backward(loss);
    ParameterMap grads = enc.gradients(g);
    std::vector<const Tensor*> gp;
    for (auto& [name, t] : grads) gp.push_back(&t);
    adam.step(params, gp);
  }
  return result;
}

double reconstruction_loss(const EncoderState& state, const corpus::LabeledCorpus& corpus,
                           std::span<const std::size_t> indices, const PretrainConfig& config) {
  if (indices.empty()) throw std::invalid_argument("reconstruction_loss: no utterances");
  Rng rng = make_rng(config.seed, 0xE7A1);
  double total = 0.0;
  for (std::size_t idx : indices) {
    Tape tape;
    EncoderBinding enc(state, tape, false);
    ReconSample s = make_recon_sample(corpus.utterances[idx].wave.samples, state.config, config, rng);
    total += recon_loss(enc, s, Mode::kEval, nullptr).value().item();
  }
  return total / static_cast<double>(indices.size());
}

}  // namespace rwl::encoder
