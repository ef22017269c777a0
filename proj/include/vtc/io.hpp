// Artifact persistence and content digests.
//
// Binary container: magic "VTCB", format version, a kind tag, then the
// payload. Doubles travel as IEEE-754 bit patterns in little-endian byte
// order, written explicitly so files and their digests are identical across
// platforms. The FNV-1a digest of the payload doubles as the provenance id
// reports carry for every artifact they reference.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtc/dataset.hpp"
#include "vtc/model.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string digest_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

// Byte stream with an FNV-1a digest folded over everything appended.
struct ByteSink {
  std::vector<unsigned char> bytes;

  void u8(unsigned char b) { bytes.push_back(b); }
  void u32(std::uint32_t x) {
    for (int i = 0; i < 4; ++i) u8(static_cast<unsigned char>(x >> (8 * i)));
  }
  void u64(std::uint64_t x) {
    for (int i = 0; i < 8; ++i) u8(static_cast<unsigned char>(x >> (8 * i)));
  }
  void i32(std::int32_t x) { u32(static_cast<std::uint32_t>(x)); }
  void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
  void tensor(const Tensor& t) {
    i32(t.rows);
    i32(t.cols);
    for (double v : t.v) f64(v);
  }
  std::uint64_t digest() const { return fnv1a64(bytes.data(), bytes.size()); }
};

struct ByteSource {
  std::vector<unsigned char> bytes;
  std::size_t pos = 0;

  explicit ByteSource(std::vector<unsigned char> b) : bytes(std::move(b)) {}

  unsigned char u8() {
    if (pos >= bytes.size()) throw std::runtime_error("io: truncated artifact");
    return bytes[pos++];
  }
  std::uint32_t u32() {
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return x;
  }
  std::uint64_t u64() {
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return x;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  Tensor tensor() {
    const int rows = i32();
    const int cols = i32();
    if (rows < 0 || cols < 0 || static_cast<long long>(rows) * cols > (1LL << 28))
      throw std::runtime_error("io: implausible tensor shape");
    Tensor t(rows, cols);
    for (double& v : t.v) v = f64();
    return t;
  }
  void done() const {
    if (pos != bytes.size()) throw std::runtime_error("io: trailing bytes in artifact");
  }
};

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kKindWeights = 1;
inline constexpr std::uint32_t kKindDataset = 2;

inline void write_header(ByteSink& sink, std::uint32_t kind) {
  sink.u8('V');
  sink.u8('T');
  sink.u8('C');
  sink.u8('B');
  sink.u32(kFormatVersion);
  sink.u32(kind);
}

inline void read_header(ByteSource& src, std::uint32_t kind) {
  const char magic[4] = {static_cast<char>(src.u8()), static_cast<char>(src.u8()),
                         static_cast<char>(src.u8()), static_cast<char>(src.u8())};
  if (std::string(magic, 4) != "VTCB") throw std::runtime_error("io: not a VTCB artifact");
  const std::uint32_t version = src.u32();
  if (version != kFormatVersion) throw std::runtime_error("io: unsupported format version");
  if (src.u32() != kind) throw std::runtime_error("io: artifact kind mismatch");
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::invalid_argument("io: cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("io: short write: " + path);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("io: cannot open for reading: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

inline std::vector<unsigned char> weights_bytes(const ModelWeights& w) {
  detail::ByteSink sink;
  detail::write_header(sink, detail::kKindWeights);
  sink.i32(w.cfg.grid_side);
  sink.i32(w.cfg.patch_dim);
  sink.i32(w.cfg.model_dim);
  sink.i32(w.cfg.heads);
  sink.i32(w.cfg.layers);
  sink.i32(w.cfg.ffn_dim);
  sink.i32(w.cfg.text_vocab);
  sink.i32(w.cfg.prompt_len);
  sink.tensor(w.patch_proj);
  sink.tensor(w.text_embed);
  sink.tensor(w.pos_visual);
  sink.tensor(w.pos_text);
  for (const ModelWeights::Layer& l : w.layers) {
    sink.tensor(l.wq);
    sink.tensor(l.wk);
    sink.tensor(l.wv);
    sink.tensor(l.wo);
    sink.tensor(l.w1);
    sink.tensor(l.w2);
    sink.tensor(l.norm1);
    sink.tensor(l.norm2);
  }
  sink.tensor(w.norm_final);
  sink.tensor(w.answer_head);
  return std::move(sink.bytes);
}

inline void save_weights(const std::string& path, const ModelWeights& w) {
  detail::write_file(path, weights_bytes(w));
}

inline ModelWeights load_weights(const std::string& path) {
  detail::ByteSource src(detail::read_file(path));
  detail::read_header(src, detail::kKindWeights);
  ModelWeights w;
  w.cfg.grid_side = src.i32();
  w.cfg.patch_dim = src.i32();
  w.cfg.model_dim = src.i32();
  w.cfg.heads = src.i32();
  w.cfg.layers = src.i32();
  w.cfg.ffn_dim = src.i32();
  w.cfg.text_vocab = src.i32();
  w.cfg.prompt_len = src.i32();
  w.cfg.validate();
  w.patch_proj = src.tensor();
  w.text_embed = src.tensor();
  w.pos_visual = src.tensor();
  w.pos_text = src.tensor();
  w.layers.resize(w.cfg.layers);
  for (ModelWeights::Layer& l : w.layers) {
    l.wq = src.tensor();
    l.wk = src.tensor();
    l.wv = src.tensor();
    l.wo = src.tensor();
    l.w1 = src.tensor();
    l.w2 = src.tensor();
    l.norm1 = src.tensor();
    l.norm2 = src.tensor();
  }
  w.norm_final = src.tensor();
  w.answer_head = src.tensor();
  src.done();
  return w;
}

inline std::vector<unsigned char> dataset_bytes(const std::vector<SyntheticSample>& samples) {
  detail::ByteSink sink;
  detail::write_header(sink, detail::kKindDataset);
  sink.u64(samples.size());
  for (const SyntheticSample& s : samples) {
    sink.tensor(s.image);
    sink.u64(s.prompt.size());
    for (int t : s.prompt) sink.i32(t);
    sink.i32(s.label);
    sink.i32(s.query_class);
    sink.u64(s.object_patches.size());
    for (int p : s.object_patches) sink.i32(p);
    for (int c : s.object_classes) sink.i32(c);
  }
  return std::move(sink.bytes);
}

inline void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples) {
  detail::write_file(path, dataset_bytes(samples));
}

inline std::vector<SyntheticSample> load_dataset(const std::string& path) {
  detail::ByteSource src(detail::read_file(path));
  detail::read_header(src, detail::kKindDataset);
  const std::uint64_t count = src.u64();
  if (count > (1ULL << 24)) throw std::runtime_error("io: implausible sample count");
  std::vector<SyntheticSample> samples(count);
  for (SyntheticSample& s : samples) {
    s.image = src.tensor();
    const std::uint64_t plen = src.u64();
    if (plen > 1024) throw std::runtime_error("io: implausible prompt length");
    s.prompt.resize(plen);
    for (int& t : s.prompt) t = src.i32();
    s.label = src.i32();
    s.query_class = src.i32();
    const std::uint64_t objs = src.u64();
    if (objs > (1ULL << 20)) throw std::runtime_error("io: implausible object count");
    s.object_patches.resize(objs);
    for (int& p : s.object_patches) p = src.i32();
    s.object_classes.resize(objs);
    for (int& c : s.object_classes) c = src.i32();
  }
  src.done();
  return samples;
}

inline std::uint64_t weights_digest(const ModelWeights& w) {
  const auto bytes = weights_bytes(w);
  return fnv1a64(bytes.data(), bytes.size());
}

inline std::uint64_t dataset_digest(const std::vector<SyntheticSample>& samples) {
  const auto bytes = dataset_bytes(samples);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace vtc
