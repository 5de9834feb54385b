#include "rwl/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "rwl/random.hpp"

namespace rwl::experiment {
namespace {

using rewire::PairStrategy;

constexpr std::string_view kSections[] = {"experiment", "corpus",       "encoder",         "pretrain",    "rewire",
                                          "rewire.twin", "rewire.neutral", "rewire.mixed", "probe"};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad(std::string_view section, std::string_view key, std::string_view why) {
  throw std::invalid_argument("config " + std::string(section) + "." + std::string(key) + ": " + std::string(why));
}

template <class T>
T parse_number(std::string_view section, std::string_view key, std::string_view text) {
  T out{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc() || ptr != text.data() + text.size()) bad(section, key, "cannot parse '" + std::string(text) + "'");
  return out;
}

std::size_t parse_size(std::string_view section, std::string_view key, std::string_view text) {
  return parse_number<std::size_t>(section, key, text);
}

int parse_int(std::string_view section, std::string_view key, std::string_view text) {
  return parse_number<int>(section, key, text);
}

double parse_double(std::string_view section, std::string_view key, std::string_view text) {
  const double v = parse_number<double>(section, key, text);
  if (!std::isfinite(v)) bad(section, key, "value must be finite");
  return v;
}

std::vector<std::size_t> parse_list(std::string_view section, std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  if (trim(text).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(parse_size(section, key, trim(text.substr(start, comma - start))));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<std::size_t> parse_level(std::string_view section, std::string_view key, std::string_view text) {
  if (text == "top") return std::nullopt;
  return parse_size(section, key, text);
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(int v) { return std::to_string(v); }

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt_level(const std::optional<std::size_t>& level) { return level ? std::to_string(*level) : "top"; }

void set_rewire(rewire::RewireConfig& r, std::string_view section, std::string_view key, std::string_view value) {
  if (key == "temperature") r.temperature = parse_double(section, key, value);
  else if (key == "learning_rate") r.learning_rate = parse_double(section, key, value);
  else if (key == "batch_size") r.batch_size = parse_size(section, key, value);
  else if (key == "mask_fraction") r.mask_fraction = parse_double(section, key, value);
  else if (key == "length_threshold") r.length_threshold = parse_size(section, key, value);
  else if (key == "updates") r.updates = parse_size(section, key, value);
  else if (key == "dropout") r.dropout = parse_double(section, key, value);
  else if (key == "pooling_level") r.pooling_level = parse_level(section, key, value);
  else bad(section, key, "unknown key");
}

}  // namespace

std::string fraction_label(double fraction) {
  for (double f : kFractions)
    if (std::abs(f - fraction) < 1e-12) return std::to_string(static_cast<int>(std::lround(f * 100))) + "pct";
  throw std::invalid_argument("fraction must be one of 0.01, 0.05, 0.10, 1.0");
}

std::size_t ProbeSettings::budget(probes::TaskKind task, double fraction) const {
  const std::string label = fraction_label(fraction);
  if (auto it = budgets.find(label + "." + std::string(probes::to_string(task))); it != budgets.end())
    return it->second;
  if (auto it = budgets.find(label); it != budgets.end()) return it->second;
  throw std::invalid_argument("probe: no budget for fraction " + label);
}

std::map<PairStrategy, rewire::RewireConfig> ExperimentConfig::default_rewire() {
  std::map<PairStrategy, rewire::RewireConfig> out;
  for (PairStrategy s : rewire::kAllStrategies) {
    rewire::RewireConfig r;
    r.updates = rewire::default_updates(s);
    out[s] = r;
  }
  return out;
}

std::uint64_t ExperimentConfig::corpus_seed() const { return mix_seed(seed, 1); }
std::uint64_t ExperimentConfig::init_seed() const { return mix_seed(seed, 2); }
std::uint64_t ExperimentConfig::pretrain_seed() const { return mix_seed(seed, 3); }
std::uint64_t ExperimentConfig::rewire_seed() const { return mix_seed(seed, 4); }
std::uint64_t ExperimentConfig::subsample_seed() const { return mix_seed(seed, 5); }
std::uint64_t ExperimentConfig::probe_seed() const { return mix_seed(seed, 6); }
std::uint64_t ExperimentConfig::diagnostic_seed() const { return mix_seed(seed, 7); }

encoder::PretrainConfig ExperimentConfig::pretrain_config() const {
  encoder::PretrainConfig p = pretrain;
  p.seed = pretrain_seed();
  return p;
}

rewire::RewireConfig ExperimentConfig::rewire_config(PairStrategy s) const {
  rewire::RewireConfig r = rewire.at(s);
  r.seed = rewire_seed();
  return r;
}

probes::ProbeConfig ExperimentConfig::probe_config(probes::TaskKind task, double fraction) const {
  probes::ProbeConfig p;
  p.budget = probe.budget(task, fraction);
  p.eval_every = probe.eval_every;
  p.batch_size = probe.batch_size;
  p.learning_rate = probe.learning_rate;
  p.seed = probe_seed();
  return p;
}

void ExperimentConfig::validate() const {
  if (utterances < 10) throw std::invalid_argument("config experiment.utterances: at least 10 required");
  if (qbe_k == 0) throw std::invalid_argument("config experiment.qbe_k: must be positive");
  encoder.validate();
  if (embedding_level && *embedding_level > encoder.n_layers)
    throw std::invalid_argument("config experiment.embedding_level: beyond the top layer");
  if (pretrain.steps == 0 || pretrain.batch_size == 0)
    throw std::invalid_argument("config pretrain: steps and batch_size must be positive");
  for (const auto& [s, r] : rewire) {
    r.validate();
    if (r.updates == 0) throw std::invalid_argument("config rewire." + std::string(rewire::to_string(s)) + ".updates: must be positive");
    if (r.pooling_level && *r.pooling_level > encoder.n_layers)
      throw std::invalid_argument("config rewire." + std::string(rewire::to_string(s)) + ".pooling_level: beyond the top layer");
  }
  if (probe.eval_every == 0 || probe.batch_size == 0)
    throw std::invalid_argument("config probe: eval_every and batch_size must be positive");
  for (double f : kFractions)
    for (probes::TaskKind t : probes::kTrainableTasks)
      if (probe.budget(t, f) == 0) throw std::invalid_argument("config probe: budgets must be positive");
}

void set_value(ExperimentConfig& c, std::string_view section, std::string_view key, std::string_view value) {
  value = trim(value);
  if (section == "experiment") {
    if (key == "seed") c.seed = parse_number<std::uint64_t>(section, key, value);
    else if (key == "utterances") c.utterances = parse_size(section, key, value);
    else if (key == "qbe_k") c.qbe_k = parse_size(section, key, value);
    else if (key == "embedding_level") c.embedding_level = parse_level(section, key, value);
    else bad(section, key, "unknown key");
  } else if (section == "corpus") {
    corpus::GeneratorConfig& g = c.corpus;
    if (key == "vocab_size") g.vocab_size = parse_int(section, key, value);
    else if (key == "num_speakers") g.num_speakers = parse_int(section, key, value);
    else if (key == "samples_per_token") g.samples_per_token = parse_int(section, key, value);
    else if (key == "min_tokens") g.min_tokens = parse_int(section, key, value);
    else if (key == "max_tokens") g.max_tokens = parse_int(section, key, value);
    else if (key == "sample_rate") g.sample_rate = parse_double(section, key, value);
    else if (key == "noise_min") g.noise_min = parse_double(section, key, value);
    else if (key == "noise_max") g.noise_max = parse_double(section, key, value);
    else if (key == "amplitude_min") g.amplitude_min = parse_double(section, key, value);
    else if (key == "amplitude_max") g.amplitude_max = parse_double(section, key, value);
    else if (key == "pitch_offset_max") g.pitch_offset_max = parse_double(section, key, value);
    else if (key == "timbre_spread") g.timbre_spread = parse_double(section, key, value);
    else if (key == "gain") g.gain = parse_double(section, key, value);
    else if (key == "intent_classes") g.intent_classes = parse_int(section, key, value);
    else bad(section, key, "unknown key");
  } else if (section == "encoder") {
    encoder::EncoderConfig& e = c.encoder;
    if (key == "conv_strides") e.conv_strides = parse_list(section, key, value);
    else if (key == "conv_channels") e.conv_channels = parse_list(section, key, value);
    else if (key == "feature_dim") e.feature_dim = parse_size(section, key, value);
    else if (key == "n_layers") e.n_layers = parse_size(section, key, value);
    else if (key == "n_heads") e.n_heads = parse_size(section, key, value);
    else if (key == "ffn_dim") e.ffn_dim = parse_size(section, key, value);
    else if (key == "dropout") e.dropout = parse_double(section, key, value);
    else bad(section, key, "unknown key");
  } else if (section == "pretrain") {
    encoder::PretrainConfig& p = c.pretrain;
    if (key == "steps") p.steps = parse_size(section, key, value);
    else if (key == "batch_size") p.batch_size = parse_size(section, key, value);
    else if (key == "learning_rate") p.learning_rate = parse_double(section, key, value);
    else if (key == "mask_fraction") p.mask_fraction = parse_double(section, key, value);
    else if (key == "length_threshold") p.length_threshold = parse_size(section, key, value);
    else if (key == "target") p.target = encoder::parse_recon_target(value);
    else bad(section, key, "unknown key");
  } else if (section == "rewire") {
    for (auto& [s, r] : c.rewire) set_rewire(r, section, key, value);
  } else if (section.starts_with("rewire.")) {
    set_rewire(c.rewire.at(rewire::parse_strategy(section.substr(7))), section, key, value);
  } else if (section == "probe") {
    if (key == "eval_every") c.probe.eval_every = parse_size(section, key, value);
    else if (key == "batch_size") c.probe.batch_size = parse_size(section, key, value);
    else if (key == "learning_rate") c.probe.learning_rate = parse_double(section, key, value);
    else if (key.starts_with("budget_")) {
      const std::string_view rest = key.substr(7);
      const auto dot = rest.find('.');
      const std::string_view label = rest.substr(0, dot);
      if (label != "1pct" && label != "5pct" && label != "10pct" && label != "100pct") bad(section, key, "unknown fraction");
      if (dot != std::string_view::npos) {
        const probes::TaskKind t = probes::parse_task(rest.substr(dot + 1));
        if (t == probes::TaskKind::kQbe) bad(section, key, "qbe has no training budget");
      }
      c.probe.budgets[std::string(rest)] = parse_size(section, key, value);
    } else bad(section, key, "unknown key");
  } else {
    throw std::invalid_argument("config: unknown section [" + std::string(section) + "]");
  }
}

void apply_override(ExperimentConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw std::invalid_argument("override '" + std::string(assignment) + "': expected section.key=value");
  const std::string_view path = trim(assignment.substr(0, eq));
  std::string_view section;
  for (std::string_view s : kSections)
    if (path.size() > s.size() + 1 && path.starts_with(s) && path[s.size()] == '.' && s.size() > section.size())
      section = s;
  if (section.empty()) throw std::invalid_argument("override '" + std::string(assignment) + "': unknown section");
  set_value(config, section, path.substr(section.size() + 1), assignment.substr(eq + 1));
}

void apply_ini(ExperimentConfig& config, std::string_view text) {
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto c = line.find_first_of("#;"); c != std::string_view::npos) line = line.substr(0, c);
    line = trim(line);
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw std::invalid_argument("unterminated section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
        if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections))
          throw std::invalid_argument("unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw std::invalid_argument("expected key = value");
      if (section.empty()) throw std::invalid_argument("key outside any section");
      set_value(config, section, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  ExperimentConfig config;
  apply_ini(config, text.str());
  return config;
}

std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "[experiment]\n"
    << "seed = " << c.seed << "\n"
    << "utterances = " << c.utterances << "\n"
    << "qbe_k = " << c.qbe_k << "\n"
    << "embedding_level = " << fmt_level(c.embedding_level) << "\n";
  const corpus::GeneratorConfig& g = c.corpus;
  o << "\n[corpus]\n"
    << "vocab_size = " << fmt(g.vocab_size) << "\n"
    << "num_speakers = " << fmt(g.num_speakers) << "\n"
    << "samples_per_token = " << fmt(g.samples_per_token) << "\n"
    << "min_tokens = " << fmt(g.min_tokens) << "\n"
    << "max_tokens = " << fmt(g.max_tokens) << "\n"
    << "sample_rate = " << fmt(g.sample_rate) << "\n"
    << "noise_min = " << fmt(g.noise_min) << "\n"
    << "noise_max = " << fmt(g.noise_max) << "\n"
    << "amplitude_min = " << fmt(g.amplitude_min) << "\n"
    << "amplitude_max = " << fmt(g.amplitude_max) << "\n"
    << "pitch_offset_max = " << fmt(g.pitch_offset_max) << "\n"
    << "timbre_spread = " << fmt(g.timbre_spread) << "\n"
    << "gain = " << fmt(g.gain) << "\n"
    << "intent_classes = " << fmt(g.intent_classes) << "\n";
  const encoder::EncoderConfig& e = c.encoder;
  o << "\n[encoder]\n"
    << "conv_strides = " << fmt_list(e.conv_strides) << "\n"
    << "conv_channels = " << fmt_list(e.conv_channels) << "\n"
    << "feature_dim = " << fmt(e.feature_dim) << "\n"
    << "n_layers = " << fmt(e.n_layers) << "\n"
    << "n_heads = " << fmt(e.n_heads) << "\n"
    << "ffn_dim = " << fmt(e.ffn_dim) << "\n"
    << "dropout = " << fmt(e.dropout) << "\n";
  const encoder::PretrainConfig& p = c.pretrain;
  o << "\n[pretrain]\n"
    << "steps = " << fmt(p.steps) << "\n"
    << "batch_size = " << fmt(p.batch_size) << "\n"
    << "learning_rate = " << fmt(p.learning_rate) << "\n"
    << "mask_fraction = " << fmt(p.mask_fraction) << "\n"
    << "length_threshold = " << fmt(p.length_threshold) << "\n"
    << "target = " << encoder::to_string(p.target) << "\n";
  for (const auto& [s, r] : c.rewire) {
    o << "\n[rewire." << rewire::to_string(s) << "]\n"
      << "temperature = " << fmt(r.temperature) << "\n"
      << "learning_rate = " << fmt(r.learning_rate) << "\n"
      << "batch_size = " << fmt(r.batch_size) << "\n"
      << "mask_fraction = " << fmt(r.mask_fraction) << "\n"
      << "length_threshold = " << fmt(r.length_threshold) << "\n"
      << "updates = " << fmt(r.updates) << "\n"
      << "dropout = " << fmt(r.dropout) << "\n"
      << "pooling_level = " << fmt_level(r.pooling_level) << "\n";
  }
  o << "\n[probe]\n"
    << "eval_every = " << fmt(c.probe.eval_every) << "\n"
    << "batch_size = " << fmt(c.probe.batch_size) << "\n"
    << "learning_rate = " << fmt(c.probe.learning_rate) << "\n";
  for (const auto& [k, v] : c.probe.budgets) o << "budget_" << k << " = " << v << "\n";
  return o.str();
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : to_ini(config)) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace rwl::experiment
