#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "prunefuse/error.hpp"
#include "prunefuse/model.hpp"

namespace prunefuse {
namespace {

constexpr char kMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

// Serializes in little-endian regardless of host order and tracks FNV-1a.
class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(reinterpret_cast<const unsigned char*>(s.data()), s.size());
  }
  void bytes(const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) hash_ = (hash_ ^ p[i]) * 0x100000001b3ULL;
    out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  std::uint64_t hash() const { return hash_; }

 private:
  std::ostream& out_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    require(n < (1u << 20), ErrorKind::kIo, "checkpoint: implausible string length");
    std::string s(n, '\0');
    bytes(reinterpret_cast<unsigned char*>(s.data()), n);
    return s;
  }
  void bytes(unsigned char* p, std::size_t n) {
    in_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::kIo, "checkpoint: truncated file");
    for (std::size_t i = 0; i < n; ++i) hash_ = (hash_ ^ p[i]) * 0x100000001b3ULL;
  }
  std::uint64_t hash() const { return hash_; }

 private:
  std::istream& in_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

void write_config(Writer& w, const ModelConfig& c) {
  w.u64(c.vocab_size);
  w.u64(c.max_seq_len);
  w.u64(c.d_model);
  w.u64(c.n_heads);
  w.u64(c.d_ff);
  w.u64(c.n_layers);
  w.u64(c.n_classes);
  w.u64(c.seed);
  w.u64(c.type_vocab_size);
  w.f64(c.layer_norm_eps);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.vocab_size = r.u64();
  c.max_seq_len = r.u64();
  c.d_model = r.u64();
  c.n_heads = r.u64();
  c.d_ff = r.u64();
  c.n_layers = r.u64();
  c.n_classes = r.u64();
  c.seed = r.u64();
  c.type_vocab_size = r.u64();
  c.layer_norm_eps = r.f64();
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, std::ostream& out) {
  Writer w(out);
  w.bytes(reinterpret_cast<const unsigned char*>(kMagic), sizeof kMagic);
  write_config(w, model.config());
  for (bool p : model.prune_mask()) w.u64(p ? 1 : 0);
  const auto params = model.all_parameters();
  w.u64(params.size());
  for (const Parameter* p : params) {
    w.str(p->name);
    w.u64(p->value.rank());
    for (std::size_t d : p->value.shape) w.u64(d);
    for (double v : p->value.data) w.f64(v);
  }
  const std::uint64_t h = w.hash();
  w.u64(h);
  require(static_cast<bool>(out), ErrorKind::kIo, "checkpoint: write failed");
}

Model load_checkpoint(std::istream& in) {
  Reader r(in);
  unsigned char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  require(std::memcmp(magic, kMagic, sizeof kMagic) == 0, ErrorKind::kIo, "checkpoint: bad magic");
  const ModelConfig config = read_config(r);
  require(config.n_layers > 0 && config.n_layers < 4096 && config.d_model < (1u << 16) && config.vocab_size < (1u << 24),
          ErrorKind::kIo, "checkpoint: implausible config header");
  config.validate();
  Model model(config);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::uint64_t flag = r.u64();
    require(flag <= 1, ErrorKind::kIo, "checkpoint: corrupt prune mask");
    model.prune_mask_[l] = flag == 1;
  }
  const auto params = model.all_parameters();
  require(r.u64() == params.size(), ErrorKind::kIo, "checkpoint: parameter count does not match config");
  for (Parameter* p : params) {
    const std::string name = r.str();
    require(name == p->name, ErrorKind::kIo, "checkpoint: expected tensor '" + p->name + "', found '" + name + "'");
    const std::uint64_t rank = r.u64();
    require(rank == p->value.rank(), ErrorKind::kIo, "checkpoint: rank mismatch for '" + name + "'");
    for (std::size_t d = 0; d < rank; ++d)
      require(r.u64() == p->value.shape[d], ErrorKind::kIo, "checkpoint: shape mismatch for '" + name + "'");
    for (double& v : p->value.data) v = r.f64();
  }
  const std::uint64_t expected = r.hash();
  require(r.u64() == expected, ErrorKind::kIo, "checkpoint: checksum mismatch");
  for (const Parameter* p : params)
    require(p->value.all_finite(), ErrorKind::kIo, "checkpoint: non-finite values in '" + p->name + "'");
  return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  save_checkpoint(model, out);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open checkpoint '" + path + "'");
  try {
    return load_checkpoint(in);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.detail());
  }
}

}  // namespace prunefuse
