#include "rwl/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace rwl::corpus {
namespace {

constexpr double kCanonicalTimbre[3] = {0.55, 0.35, 0.10};

struct Timbre {
  double w[3];
};

Timbre speaker_timbre(int speaker_id, double spread) {
  Timbre t{};
  for (int i = 0; i < 3; ++i) {
    double factor = 1.0;
    if (speaker_id != kNeutralSpeaker) {
      const std::uint64_t h = mix_seed(0x5EA7u + static_cast<std::uint64_t>(speaker_id), static_cast<std::uint64_t>(i));
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
      factor = 1.0 + spread * u;
    }
    t.w[i] = kCanonicalTimbre[i] * factor;
  }
  return t;
}

// Base frequencies in Hz for token id c.
std::pair<double, double> token_frequencies(int c) {
  return {250.0 + 90.0 * static_cast<double>(c % 8), 1100.0 + 350.0 * static_cast<double>(c / 8)};
}

}  // namespace

const std::vector<std::size_t>& LabeledCorpus::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kDev: return dev;
    case Split::kTest: return test;
  }
  throw std::invalid_argument("unknown split");
}

void validate(const UtteranceSpec& spec, const GeneratorConfig& config) {
  if (spec.content.empty()) throw std::invalid_argument("utterance spec: content must be non-empty");
  if (spec.prosody.size() != spec.content.size())
    throw std::invalid_argument("utterance spec: prosody must have one entry per token");
  if (!(spec.noise_level >= 0.0)) throw std::invalid_argument("utterance spec: noise_level must be >= 0");
  for (int c : spec.content)
    if (c < 0 || c >= config.vocab_size) throw std::invalid_argument("utterance spec: token outside vocabulary");
  if (spec.speaker_id != kNeutralSpeaker && (spec.speaker_id < 0 || spec.speaker_id >= config.num_speakers))
    throw std::invalid_argument("utterance spec: speaker outside range");
}

Waveform render(const UtteranceSpec& spec, const GeneratorConfig& config) {
  validate(spec, config);
  const std::size_t per_token = static_cast<std::size_t>(config.samples_per_token);
  const Timbre timbre = speaker_timbre(spec.speaker_id, config.timbre_spread);
  Rng noise_rng = make_rng(spec.seed, 0x401);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double two_pi_over_sr = 2.0 * std::numbers::pi / config.sample_rate;

  Waveform w;
  w.samples.resize(spec.content.size() * per_token);
  double phase1 = 0.0, phase2 = 0.0;
  std::size_t pos = 0;
  for (std::size_t t = 0; t < spec.content.size(); ++t) {
    auto [f1, f2] = token_frequencies(spec.content[t]);
    const double shift = 1.0 + spec.prosody[t].pitch_offset;
    const double step1 = two_pi_over_sr * f1 * shift;
    const double step2 = two_pi_over_sr * f2 * shift;
    const double amp = config.gain * spec.prosody[t].amplitude;
    for (std::size_t i = 0; i < per_token; ++i, ++pos) {
      double s = timbre.w[0] * std::sin(phase1) + timbre.w[1] * std::sin(phase2) +
                 timbre.w[2] * std::sin(2.0 * phase1);
      s *= amp;
      if (spec.noise_level > 0.0) s += spec.noise_level * normal(noise_rng);
      w.samples[pos] = static_cast<float>(std::tanh(s));
      phase1 = std::fmod(phase1 + step1, 2.0 * std::numbers::pi);
      phase2 = std::fmod(phase2 + step2, 2.0 * std::numbers::pi);
    }
  }
  return w;
}

UtteranceSpec neutralize(const UtteranceSpec& spec) {
  UtteranceSpec n;
  n.content = spec.content;
  n.speaker_id = kNeutralSpeaker;
  n.prosody.assign(spec.content.size(), Prosody{});
  n.noise_level = 0.0;
  n.seed = 0;
  return n;
}

Waveform render_neutral(const UtteranceSpec& spec, const GeneratorConfig& config) {
  return render(neutralize(spec), config);
}

LabeledCorpus sample_corpus(std::size_t n, const GeneratorConfig& config, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_corpus: n must be at least 1");
  LabeledCorpus corpus;
  corpus.config = config;
  corpus.utterances.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, i);
    UtteranceSpec spec;
    spec.seed = mix_seed(seed ^ 0xC0FFEEu, i);
    const int tokens = std::uniform_int_distribution<int>(config.min_tokens, config.max_tokens)(rng);
    std::uniform_int_distribution<int> token(0, config.vocab_size - 1);
    for (int t = 0; t < tokens; ++t) spec.content.push_back(token(rng));
    spec.speaker_id = std::uniform_int_distribution<int>(0, config.num_speakers - 1)(rng);
    for (int t = 0; t < tokens; ++t)
      spec.prosody.push_back(Prosody{uniform(rng, config.amplitude_min, config.amplitude_max),
                                     uniform(rng, -config.pitch_offset_max, config.pitch_offset_max)});
    spec.noise_level = uniform(rng, config.noise_min, config.noise_max);
    Waveform w = render(spec, config);
    corpus.utterances.push_back(Utterance{std::move(spec), std::move(w)});
  }
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_dev = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) corpus.train.push_back(i);
    else if (i < n_train + n_dev) corpus.dev.push_back(i);
    else corpus.test.push_back(i);
  }
  return corpus;
}

LabeledCorpus subsample_training(const LabeledCorpus& corpus, double fraction, std::uint64_t seed) {
  static constexpr double kGrid[] = {0.01, 0.05, 0.10, 1.0};
  if (std::none_of(std::begin(kGrid), std::end(kGrid), [&](double g) { return std::abs(g - fraction) < 1e-12; }))
    throw std::invalid_argument("subsample_training: fraction must be one of 0.01, 0.05, 0.10, 1.0");
  LabeledCorpus out = corpus;
  if (fraction == 1.0 || corpus.train.empty()) return out;

  const std::size_t total = corpus.train.size();
  const std::size_t target =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total))));

  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t idx : corpus.train) groups[content_class(corpus.utterances[idx].spec)].push_back(idx);

  Rng rng = make_rng(seed, 0x5AB);
  std::vector<int> classes;
  for (auto& [cls, members] : groups) {
    std::shuffle(members.begin(), members.end(), rng);
    classes.push_back(cls);
  }

  std::map<int, std::size_t> quota;
  if (target < classes.size()) {
    std::shuffle(classes.begin(), classes.end(), rng);
    for (std::size_t k = 0; k < target; ++k) quota[classes[k]] = 1;
  } else {
    // One per class, the remainder proportional to the leftover class sizes
    // (largest-remainder rounding, ties broken by class id).
    const std::size_t extra = target - classes.size();
    const std::size_t leftover = total - classes.size();
    std::vector<std::pair<double, int>> remainders;
    std::size_t assigned = 0;
    for (int cls : classes) {
      const double share = leftover == 0 ? 0.0
                                         : static_cast<double>(extra) *
                                               static_cast<double>(groups[cls].size() - 1) /
                                               static_cast<double>(leftover);
      const auto whole = static_cast<std::size_t>(std::floor(share));
      quota[cls] = 1 + whole;
      assigned += whole;
      remainders.emplace_back(share - static_cast<double>(whole), cls);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < extra && k < remainders.size(); ++k) {
      const int cls = remainders[k].second;
      if (quota[cls] < groups[cls].size()) {
        ++quota[cls];
        ++assigned;
      }
    }
  }

  std::vector<std::size_t> chosen;
  for (auto& [cls, q] : quota) {
    const auto& members = groups[cls];
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(std::min(q, members.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  out.train = std::move(chosen);
  return out;
}

int content_class(const UtteranceSpec& spec) {
  if (spec.content.empty()) throw std::invalid_argument("content_class: empty content");
  return spec.content.front();
}

int intent_label(const UtteranceSpec& spec, int intent_classes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (int c : spec.content) {
    for (int b = 0; b < 4; ++b) {
      h ^= static_cast<std::uint64_t>((static_cast<std::uint32_t>(c) >> (8 * b)) & 0xFFu);
      h *= 0x100000001b3ULL;
    }
  }
  return static_cast<int>(h % static_cast<std::uint64_t>(intent_classes));
}

int speaker_label(const UtteranceSpec& spec) { return spec.speaker_id; }

std::vector<std::size_t> frame_labels(const UtteranceSpec& spec, std::size_t frame_count, std::size_t hop,
                                      int samples_per_token) {
  std::vector<std::size_t> labels(frame_count);
  const std::size_t per_token = static_cast<std::size_t>(samples_per_token);
  for (std::size_t f = 0; f < frame_count; ++f) {
    const std::size_t centre = f * hop + hop / 2;
    const std::size_t t = std::min(centre / per_token, spec.content.size() - 1);
    labels[f] = static_cast<std::size_t>(spec.content[t]);
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

using nlohmann::json;

json config_to_json(const GeneratorConfig& c) {
  return json{{"vocab_size", c.vocab_size},         {"num_speakers", c.num_speakers},
              {"samples_per_token", c.samples_per_token}, {"min_tokens", c.min_tokens},
              {"max_tokens", c.max_tokens},         {"sample_rate", c.sample_rate},
              {"noise_min", c.noise_min},           {"noise_max", c.noise_max},
              {"amplitude_min", c.amplitude_min},   {"amplitude_max", c.amplitude_max},
              {"pitch_offset_max", c.pitch_offset_max}, {"timbre_spread", c.timbre_spread},
              {"gain", c.gain},                     {"intent_classes", c.intent_classes}};
}

GeneratorConfig config_from_json(const json& j) {
  GeneratorConfig c;
  c.vocab_size = j.at("vocab_size");
  c.num_speakers = j.at("num_speakers");
  c.samples_per_token = j.at("samples_per_token");
  c.min_tokens = j.at("min_tokens");
  c.max_tokens = j.at("max_tokens");
  c.sample_rate = j.at("sample_rate");
  c.noise_min = j.at("noise_min");
  c.noise_max = j.at("noise_max");
  c.amplitude_min = j.at("amplitude_min");
  c.amplitude_max = j.at("amplitude_max");
  c.pitch_offset_max = j.at("pitch_offset_max");
  c.timbre_spread = j.at("timbre_spread");
  c.gain = j.at("gain");
  c.intent_classes = j.at("intent_classes");
  return c;
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

void write_f32(const std::filesystem::path& path, const std::vector<float>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (float s : samples) {
    const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(s));
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<float> samples(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits))
      throw std::runtime_error("sample file shorter than manifest length: " + path.string());
    samples[i] = std::bit_cast<float>(to_little_endian(bits));
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("sample file longer than manifest length: " + path.string());
  return samples;
}

std::string split_name(const LabeledCorpus& c, std::size_t i) {
  if (std::binary_search(c.train.begin(), c.train.end(), i)) return "train";
  if (std::binary_search(c.dev.begin(), c.dev.end(), i)) return "dev";
  if (std::binary_search(c.test.begin(), c.test.end(), i)) return "test";
  return "unused";
}

}  // namespace

void save_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "samples");
  {
    std::ofstream cfg(dir / "generator.json");
    cfg << config_to_json(corpus.config).dump(2) << '\n';
    if (!cfg) throw std::runtime_error("cannot write generator config in " + dir.string());
  }
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    json prosody = json::array();
    for (const auto& p : u.spec.prosody) prosody.push_back(json::array({p.amplitude, p.pitch_offset}));
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.f32", i);
    const json rec{{"id", i},
                   {"split", split_name(corpus, i)},
                   {"content", u.spec.content},
                   {"speaker_id", u.spec.speaker_id},
                   {"prosody", prosody},
                   {"noise_level", u.spec.noise_level},
                   {"seed", u.spec.seed},
                   {"length", u.wave.size()},
                   {"samples", std::string("samples/") + name},
                   {"labels",
                    {{"content_class", content_class(u.spec)},
                     {"intent", intent_label(u.spec, corpus.config.intent_classes)},
                     {"speaker", speaker_label(u.spec)}}}};
    manifest << rec.dump() << '\n';
    write_f32(dir / "samples" / name, u.wave.samples);
  }
  if (!manifest) throw std::runtime_error("manifest write failed in " + dir.string());
}

LabeledCorpus load_corpus(const std::filesystem::path& dir) {
  LabeledCorpus corpus;
  {
    std::ifstream cfg(dir / "generator.json");
    if (!cfg) throw std::runtime_error("missing generator.json in " + dir.string());
    corpus.config = config_from_json(json::parse(cfg));
  }
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("missing manifest.jsonl in " + dir.string());
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    const std::size_t id = rec.at("id");
    if (id != corpus.utterances.size()) throw std::runtime_error("manifest ids out of order");
    Utterance u;
    u.spec.content = rec.at("content").get<std::vector<int>>();
    u.spec.speaker_id = rec.at("speaker_id");
    for (const auto& p : rec.at("prosody")) u.spec.prosody.push_back(Prosody{p.at(0), p.at(1)});
    u.spec.noise_level = rec.at("noise_level");
    u.spec.seed = rec.at("seed");
    u.wave.samples = read_f32(dir / rec.at("samples").get<std::string>(), rec.at("length"));
    const std::string split = rec.at("split");
    if (split == "train") corpus.train.push_back(id);
    else if (split == "dev") corpus.dev.push_back(id);
    else if (split == "test") corpus.test.push_back(id);
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace rwl::corpus
