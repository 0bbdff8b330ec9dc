#include "rpt/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "rpt/attacks.hpp"

namespace rpt {

namespace {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

constexpr char kMagic[4] = {'R', 'P', 'T', 'F'};
constexpr std::size_t kHeaderBytes = 32;

const char* kind_name(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::prefix: return "prefix";
    case ArtifactKind::robust: return "robust";
    case ArtifactKind::projection: return "projection";
    case ArtifactKind::dataset: return "dataset";
    case ArtifactKind::lm: return "lm";
  }
  return "unknown";
}

class Writer {
 public:
  explicit Writer(const ArtifactHeader& h) {
    bytes_.resize(kHeaderBytes);
    std::memcpy(bytes_.data(), kMagic, 4);
    put_at(4, kArtifactVersion);
    put_at(6, static_cast<std::uint16_t>(h.kind));
    for (int i = 0; i < 4; ++i) put_at(8 + 4 * i, h.dims[static_cast<std::size_t>(i)]);
    put_at(24, h.seed);
  }
  void tensor(const Tensor& t) {
    const auto d = t.data();
    const auto* p = reinterpret_cast<const char*>(d.data());
    bytes_.insert(bytes_.end(), p, p + d.size() * sizeof(float));
  }
  void word(std::uint32_t w) {
    const auto* p = reinterpret_cast<const char*>(&w);
    bytes_.insert(bytes_.end(), p, p + 4);
  }
  void write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!f) throw std::runtime_error("write failed for " + path.string());
  }

 private:
  template <typename T>
  void put_at(std::size_t at, T v) {
    std::memcpy(bytes_.data() + at, &v, sizeof(T));
  }
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(const std::filesystem::path& path, ArtifactKind expected) : path_(path.string()) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError(path_ + ": cannot open file");
    bytes_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (bytes_.size() < kHeaderBytes) throw LoadError(path_ + ": truncated header");
    if (std::memcmp(bytes_.data(), kMagic, 4) != 0) throw LoadError(path_ + ": bad magic (expected RPTF)");
    const auto version = get<std::uint16_t>(4);
    if (version != kArtifactVersion) {
      throw LoadError(path_ + ": unsupported version " + std::to_string(version));
    }
    header_.kind = static_cast<ArtifactKind>(get<std::uint16_t>(6));
    for (int i = 0; i < 4; ++i) header_.dims[static_cast<std::size_t>(i)] = get<std::uint32_t>(8 + 4 * i);
    header_.seed = get<std::uint64_t>(24);
    if (expected != header_.kind) {
      throw LoadError(path_ + ": kind is " + std::to_string(static_cast<int>(header_.kind)) + ", expected " +
                      kind_name(expected));
    }
    pos_ = kHeaderBytes;
  }

  const ArtifactHeader& header() const { return header_; }

  void expect_dim(int index, std::uint32_t value, const char* field) const {
    if (header_.dims[static_cast<std::size_t>(index)] != value) {
      throw LoadError(path_ + ": dims[" + std::to_string(index) + "] (" + field + ") is " +
                      std::to_string(header_.dims[static_cast<std::size_t>(index)]) + ", expected " +
                      std::to_string(value));
    }
  }

  void fill(Tensor& t) {
    const std::size_t n = t.size() * sizeof(float);
    need(n);
    std::memcpy(t.data().data(), bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::uint32_t word() {
    need(4);
    const auto w = get<std::uint32_t>(pos_);
    pos_ += 4;
    return w;
  }

  void finish() const {
    if (pos_ != bytes_.size()) {
      throw LoadError(path_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes after payload");
    }
  }

 private:
  template <typename T>
  T get(std::size_t at) const {
    T v;
    std::memcpy(&v, bytes_.data() + at, sizeof(T));
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError(path_ + ": truncated payload");
  }

  std::string path_;
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
  ArtifactHeader header_;
};

std::uint32_t u32(int v) { return static_cast<std::uint32_t>(v); }

std::array<std::uint32_t, 4> model_dims(const ModelConfig& cfg) {
  return {u32(cfg.prefix_len), u32(cfg.hidden_dim), u32(cfg.num_layers), 0};
}

void expect_model_dims(const Reader& r, const ModelConfig& cfg) {
  r.expect_dim(0, u32(cfg.prefix_len), "prefix_len");
  r.expect_dim(1, u32(cfg.hidden_dim), "hidden_dim");
  r.expect_dim(2, u32(cfg.num_layers), "num_layers");
}

std::uint32_t provenance_code(const std::string& p) {
  if (p == "clean") return 0;
  return static_cast<std::uint32_t>(parse_attack(p)) + 1;
}

std::string provenance_name(std::uint32_t code, const std::string& path) {
  if (code == 0) return "clean";
  if (code > 4) throw LoadError(path + ": unknown provenance code " + std::to_string(code));
  return attack_name(static_cast<AttackKind>(code - 1));
}

}  // namespace

ArtifactHeader read_header(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError(path.string() + ": cannot open file");
  char buf[kHeaderBytes];
  if (!f.read(buf, kHeaderBytes)) throw LoadError(path.string() + ": truncated header");
  if (std::memcmp(buf, kMagic, 4) != 0) throw LoadError(path.string() + ": bad magic (expected RPTF)");
  std::uint16_t version, kind;
  std::memcpy(&version, buf + 4, 2);
  std::memcpy(&kind, buf + 6, 2);
  if (version != kArtifactVersion) throw LoadError(path.string() + ": unsupported version " + std::to_string(version));
  ArtifactHeader h;
  h.kind = static_cast<ArtifactKind>(kind);
  std::memcpy(h.dims.data(), buf + 8, 16);
  std::memcpy(&h.seed, buf + 24, 8);
  return h;
}

void save_artifact(const std::filesystem::path& path, const PrefixParameters& prefix, const ModelConfig& cfg,
                   std::uint64_t seed) {
  check_prefix_shape(cfg, prefix.expansion, "prefix expansion");
  Writer w({ArtifactKind::prefix, model_dims(cfg), seed});
  for (const Tensor* t : prefix.trainables()) w.tensor(*t);
  w.tensor(prefix.expansion);
  w.write(path);
}

PrefixParameters load_prefix(const std::filesystem::path& path, const ModelConfig& cfg) {
  Reader r(path, ArtifactKind::prefix);
  expect_model_dims(r, cfg);
  const int d = cfg.hidden_dim, out = cfg.num_layers * cfg.hidden_dim;
  PrefixParameters p;
  p.core = Tensor({cfg.prefix_len, d});
  p.w_in = Tensor({d, 2 * d});
  p.b_in = Tensor({1, 2 * d});
  p.w_out = Tensor({2 * d, out});
  p.b_out = Tensor({1, out});
  p.expansion = Tensor({cfg.prefix_len, out});
  for (Tensor* t : p.trainables()) r.fill(*t);
  r.fill(p.expansion);
  r.finish();
  return p;
}

void save_artifact(const std::filesystem::path& path, const RobustPrefix& robust, const ModelConfig& cfg,
                   std::uint64_t seed) {
  check_prefix_shape(cfg, robust.offset, "robust prefix");
  auto dims = model_dims(cfg);
  for (int l : robust.trainable_layers) dims[3] |= 1u << l;
  Writer w({ArtifactKind::robust, dims, seed});
  w.tensor(robust.offset);
  w.write(path);
}

RobustPrefix load_robust(const std::filesystem::path& path, const ModelConfig& cfg) {
  Reader r(path, ArtifactKind::robust);
  expect_model_dims(r, cfg);
  std::vector<int> layers;
  const std::uint32_t mask = r.header().dims[3];
  if (mask >> cfg.num_layers) throw LoadError(path.string() + ": dims[3] (layer mask) names layers beyond num_layers");
  for (int l = 0; l < cfg.num_layers; ++l) {
    if (mask & (1u << l)) layers.push_back(l);
  }
  RobustPrefix out = RobustPrefix::zeros(cfg, layers);
  r.fill(out.offset);
  r.finish();
  return out;
}

void save_artifact(const std::filesystem::path& path, const ProjectionSet& proj, const ModelConfig& cfg,
                   std::uint64_t seed) {
  std::uint32_t mask = 0;
  for (int l : proj.layers) mask |= 1u << l;
  Writer w({ArtifactKind::projection, {u32(static_cast<int>(proj.size())), u32(cfg.hidden_dim), mask, 0}, seed});
  for (std::size_t k = 0; k < proj.size(); ++k) {
    w.tensor(proj.projectors[k]);
    w.tensor(proj.means[k]);
  }
  w.write(path);
}

ProjectionSet load_projection(const std::filesystem::path& path, const ModelConfig& cfg) {
  Reader r(path, ArtifactKind::projection);
  r.expect_dim(1, u32(cfg.hidden_dim), "hidden_dim");
  const std::uint32_t count = r.header().dims[0];
  const std::uint32_t mask = r.header().dims[2];
  ProjectionSet out;
  for (int l = 0; l < cfg.num_layers; ++l) {
    if (mask & (1u << l)) out.layers.push_back(l);
  }
  if (out.layers.size() != count || (mask >> cfg.num_layers)) {
    throw LoadError(path.string() + ": dims[2] (layer mask) does not match dims[0] (layer count)");
  }
  const int d = cfg.hidden_dim;
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor q({d, d}), mu({1, d});
    r.fill(q);
    r.fill(mu);
    double trace = 0.0;
    for (int i = 0; i < d; ++i) trace += q.at(i, i);
    out.projectors.push_back(std::move(q));
    out.means.push_back(std::move(mu));
    out.ranks.push_back(static_cast<int>(std::lround(trace)));
  }
  r.finish();
  return out;
}

void save_artifact(const std::filesystem::path& path, const Dataset& data, std::uint64_t seed) {
  Writer w({ArtifactKind::dataset, {u32(static_cast<int>(data.size())), 0, 0, 0}, seed});
  for (const auto& ex : data) {
    w.word(u32(ex.label));
    w.word(provenance_code(ex.provenance));
    w.word(static_cast<std::uint32_t>(ex.seed));
    w.word(static_cast<std::uint32_t>(ex.seed >> 32));
    w.word(u32(static_cast<int>(ex.context.size())));
    w.word(u32(static_cast<int>(ex.edits.size())));
    for (Token t : ex.context) w.word(u32(t));
    for (const Edit& e : ex.edits) {
      w.word(u32(e.position));
      w.word(u32(e.old_token));
      w.word(u32(e.new_token));
    }
  }
  w.write(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Reader r(path, ArtifactKind::dataset);
  const std::uint32_t count = r.header().dims[0];
  Dataset out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Example ex;
    ex.label = static_cast<Token>(r.word());
    ex.provenance = provenance_name(r.word(), path.string());
    const std::uint64_t lo = r.word();
    const std::uint64_t hi = r.word();
    ex.seed = lo | (hi << 32);
    const std::uint32_t n = r.word();
    const std::uint32_t edits = r.word();
    for (std::uint32_t k = 0; k < n; ++k) ex.context.push_back(static_cast<Token>(r.word()));
    for (std::uint32_t k = 0; k < edits; ++k) {
      Edit e;
      e.position = static_cast<int>(r.word());
      e.old_token = static_cast<Token>(r.word());
      e.new_token = static_cast<Token>(r.word());
      ex.edits.push_back(e);
    }
    out.push_back(std::move(ex));
  }
  r.finish();
  return out;
}

void save_artifact(const std::filesystem::path& path, const LMParameters& lm, const ModelConfig& cfg,
                   std::uint64_t seed) {
  Writer w({ArtifactKind::lm,
            {u32(cfg.num_layers), u32(cfg.hidden_dim), u32(cfg.vocab_size),
             u32(cfg.max_seq_len) | (u32(cfg.num_heads) << 16)},
            seed});
  for (const Tensor* t : lm.tensors()) w.tensor(*t);
  w.write(path);
}

LMParameters load_lm(const std::filesystem::path& path, const ModelConfig& cfg) {
  Reader r(path, ArtifactKind::lm);
  r.expect_dim(0, u32(cfg.num_layers), "num_layers");
  r.expect_dim(1, u32(cfg.hidden_dim), "hidden_dim");
  r.expect_dim(2, u32(cfg.vocab_size), "vocab_size");
  r.expect_dim(3, u32(cfg.max_seq_len) | (u32(cfg.num_heads) << 16), "max_seq_len | num_heads << 16");
  LMParameters lm = LMParameters::init(cfg, 0);
  for (Tensor* t : lm.tensors()) r.fill(*t);
  r.finish();
  return lm;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError(path.string() + ": cannot open file");
  std::uint64_t h = 1469598103934665603ULL;
  char c;
  while (f.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace rpt
