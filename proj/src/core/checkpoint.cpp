#include "rwl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace rwl::checkpoint {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'R', 'W', 'L', '1'};

std::string_view kind_text(CheckpointErrorKind k) {
  switch (k) {
    case CheckpointErrorKind::kNotACheckpoint: return "not a checkpoint";
    case CheckpointErrorKind::kUnsupportedVersion: return "unsupported version";
    case CheckpointErrorKind::kCorrupt: return "corrupt checkpoint";
  }
  return "corrupt checkpoint";
}

[[noreturn]] void corrupt(const std::string& detail) { throw CheckpointError(CheckpointErrorKind::kCorrupt, detail); }

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) corrupt(std::string("truncated ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

json config_json(const encoder::EncoderState& s) {
  const encoder::EncoderConfig& c = s.config;
  return json{{"conv_strides", c.conv_strides}, {"conv_channels", c.conv_channels}, {"feature_dim", c.feature_dim},
              {"n_layers", c.n_layers},         {"n_heads", c.n_heads},             {"ffn_dim", c.ffn_dim},
              {"dropout", c.dropout},           {"rng_seed", s.rng_seed}};
}

}  // namespace

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& detail)
    : std::runtime_error(std::string(kind_text(kind)) + (detail.empty() ? "" : ": " + detail)), kind_(kind) {}

std::string serialize(const encoder::EncoderState& state, std::uint64_t source_hash) {
  const auto shapes = encoder::parameter_shapes(state.config);
  if (shapes.size() != state.params.size()) throw std::invalid_argument("save_checkpoint: parameter set does not match config");
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  const std::string config = config_json(state).dump();
  put<std::uint64_t>(out, config.size());
  out += config;
  put<std::uint64_t>(out, source_hash);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.params.size()));
  for (const auto& [name, expected] : shapes) {
    const auto it = state.params.find(name);
    if (it == state.params.end() || it->second.shape() != expected)
      throw std::invalid_argument("save_checkpoint: parameter " + name + " does not match config");
    const Tensor& t = it->second;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(CheckpointErrorKind::kNotACheckpoint, "bad magic");
  Reader r(bytes);
  r.take(sizeof kMagic, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw CheckpointError(CheckpointErrorKind::kUnsupportedVersion, "version " + std::to_string(version));

  Checkpoint ck;
  const auto config_len = r.get<std::uint64_t>("config length");
  const std::string config_text = r.take(config_len, "config");
  try {
    const json j = json::parse(config_text);
    encoder::EncoderConfig& c = ck.state.config;
    c.conv_strides = j.at("conv_strides").get<std::vector<std::size_t>>();
    c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    ck.state.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    c.validate();
  } catch (const std::exception& e) {
    corrupt(std::string("bad config: ") + e.what());
  }
  ck.source_hash = r.get<std::uint64_t>("source hash");

  const auto shapes = encoder::parameter_shapes(ck.state.config);
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != shapes.size()) corrupt("expected " + std::to_string(shapes.size()) + " parameters");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.take(r.get<std::uint32_t>("name length"), "name");
    const auto expected = shapes.find(name);
    if (expected == shapes.end()) corrupt("unknown parameter " + name);
    if (ck.state.params.count(name)) corrupt("duplicate parameter " + name);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank != expected->second.size()) corrupt("rank mismatch for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>("dims"));
    if (shape != expected->second) corrupt("shape mismatch for " + name);
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>("data"));
    ck.state.params.emplace(name, Tensor(shape, std::move(data)));
  }
  if (!r.done()) corrupt("trailing bytes");
  return ck;
}

void save_checkpoint(const encoder::EncoderState& state, const std::filesystem::path& path, std::uint64_t source_hash) {
  const std::string bytes = serialize(state, source_hash);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

}  // namespace rwl::checkpoint
