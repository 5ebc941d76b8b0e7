#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "amad/data.hpp"
#include "amad/model.hpp"

// Versioned binary container shared by model checkpoints and series dumps:
// an 8-byte magic, a format version, a payload kind, then the payload.
// Checkpoints carry the ModelConfig header followed by every named f64
// array in declaration order; round-trips are byte-exact.

namespace amad {

constexpr char kContainerMagic[8] = {'A', 'M', 'A', 'D', 'B', 'I', 'N', '\0'};
constexpr std::uint32_t kContainerVersion = 1;
constexpr std::uint32_t kPayloadCheckpoint = 1;
constexpr std::uint32_t kPayloadSeries = 2;

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write " + path);
  }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void f64_array(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f64(p[i]);
  }

 private:
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open " + path);
  }
  std::uint8_t u8() {
    int c = in_.get();
    if (c == EOF) fail();
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    if (!in_.read(s.data(), n)) fail();
    return s;
  }
  void f64_array(double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = f64();
  }
  [[noreturn]] void fail() const { throw DataError(path_ + ": truncated container"); }

 private:
  std::ifstream in_;
  std::string path_;
};

inline void write_header(ByteWriter& w, std::uint32_t payload) {
  w.raw(kContainerMagic, 8);
  w.u32(kContainerVersion);
  w.u32(payload);
}

inline void read_header(ByteReader& r, std::uint32_t expected_payload, const std::string& path) {
  char magic[8];
  for (int i = 0; i < 8; ++i) magic[i] = static_cast<char>(r.u8());
  if (std::memcmp(magic, kContainerMagic, 8) != 0) {
    throw DataError(path + ": not an AMAD container");
  }
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    throw DataError(path + ": unsupported container version " + std::to_string(version));
  }
  const std::uint32_t payload = r.u32();
  if (payload != expected_payload) {
    throw DataError(path + ": unexpected payload kind " + std::to_string(payload));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// model checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const AmadParams& params) {
  detail::ByteWriter w(path);
  detail::write_header(w, kPayloadCheckpoint);
  w.u64(cfg.n_layers);
  w.u64(cfg.d_model);
  w.u64(cfg.n_heads);
  w.u64(cfg.window_len);
  w.u64(cfg.input_dim);
  w.f64(cfg.mixup_alpha);
  w.f64(cfg.rope_base);
  w.u64(cfg.seed);
  w.u8(cfg.use_automask ? 1 : 0);
  w.u8(cfg.paper_scaling ? 1 : 0);

  std::vector<std::pair<std::string, const Tensor*>> arrays;
  const_cast<AmadParams&>(params).for_each(
      [&](const std::string& name, Tensor& t) { arrays.emplace_back(name, &t); });
  w.u64(arrays.size());
  for (const auto& [name, t] : arrays) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t->ndim()));
    for (std::size_t d : t->shape()) w.u64(d);
    w.f64_array(t->data(), t->size());
  }
}

struct Checkpoint {
  ModelConfig cfg;
  AmadParams params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  detail::read_header(r, kPayloadCheckpoint, path);
  Checkpoint ck;
  ck.cfg.n_layers = r.u64();
  ck.cfg.d_model = r.u64();
  ck.cfg.n_heads = r.u64();
  ck.cfg.window_len = r.u64();
  ck.cfg.input_dim = r.u64();
  ck.cfg.mixup_alpha = r.f64();
  ck.cfg.rope_base = r.f64();
  ck.cfg.seed = r.u64();
  ck.cfg.use_automask = r.u8() != 0;
  ck.cfg.paper_scaling = r.u8() != 0;
  ck.cfg.validate();

  // Build the parameter skeleton, then fill arrays by declared name.
  ck.params = init_params(ck.cfg);
  const std::uint64_t count = r.u64();
  std::vector<std::pair<std::string, Tensor*>> slots;
  ck.params.for_each([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
  if (count != slots.size()) {
    throw DataError(path + ": checkpoint holds " + std::to_string(count) + " arrays, expected " +
                    std::to_string(slots.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    if (name != slots[i].first) {
      throw DataError(path + ": array '" + name + "' out of order, expected '" + slots[i].first +
                      "'");
    }
    const std::uint32_t ndim = r.u32();
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = r.u64();
    if (shape != slots[i].second->shape()) {
      throw DataError(path + ": array '" + name + "' has shape " + shape_str(shape) +
                      ", expected " + shape_str(slots[i].second->shape()));
    }
    r.f64_array(slots[i].second->data(), slots[i].second->size());
  }
  return ck;
}

// ---------------------------------------------------------------------------
// binary series (same container family, series payload)
// ---------------------------------------------------------------------------

inline void save_series_binary(const TimeSeries& s, const std::string& path) {
  detail::ByteWriter w(path);
  detail::write_header(w, kPayloadSeries);
  w.u64(s.length);
  w.u64(s.dims);
  w.u8(s.labels.empty() ? 0 : 1);
  for (std::size_t c = 0; c < s.dims; ++c) {
    w.str(c < s.channels.size() ? s.channels[c] : "c" + std::to_string(c));
  }
  w.f64_array(s.values.data(), s.values.size());
  if (!s.labels.empty()) w.raw(s.labels.data(), s.labels.size());
}

inline TimeSeries load_series_binary(const std::string& path) {
  detail::ByteReader r(path);
  detail::read_header(r, kPayloadSeries, path);
  TimeSeries s;
  s.length = r.u64();
  s.dims = r.u64();
  const bool has_labels = r.u8() != 0;
  for (std::size_t c = 0; c < s.dims; ++c) s.channels.push_back(r.str());
  s.values.resize(s.length * s.dims);
  r.f64_array(s.values.data(), s.values.size());
  if (has_labels) {
    s.labels.resize(s.length);
    for (std::size_t i = 0; i < s.length; ++i) s.labels[i] = r.u8();
  }
  return s;
}

// Dispatcher for the CSV/binary ingestion contract.
inline TimeSeries load_series(const std::string& path, const std::string& format) {
  if (format == "csv") return load_series_csv(path);
  if (format == "binary") return load_series_binary(path);
  throw ConfigError("load_series: unknown format '" + format + "'");
}

}  // namespace amad
