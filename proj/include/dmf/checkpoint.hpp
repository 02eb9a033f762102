// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "DMF1"                      magic
//   u32   version               (= 1)
//   u64   config length, then that many bytes of UTF-8 config JSON
//   u64   tensor count, then per tensor:
//           u32 name length, name bytes
//           u8  dtype (0 = f32, 1 = f64)
//           u32 rank, rank x u64 extents
//           payload, row-major little-endian
//   u64   training step
//   u8    EMA flag; when 1, a second tensor table (same layout) follows
//
// Tables hold parameters followed by buffers, in the model's naming order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmf/error.hpp"
#include "dmf/model.hpp"

namespace dmf {

inline constexpr char kCheckpointMagic[4] = {'D', 'M', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace ckpt {

struct Writer {
  std::ostream& out;
  template <class U>
  void pod(U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
};

struct Reader {
  std::istream& in;
  std::string path;
  void bytes(void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw TruncatedError("checkpoint '" + path + "': truncated while reading " + what);
  }
  template <class U>
  U pod(const char* what) {
    U v;
    bytes(&v, sizeof(U), what);
    return v;
  }
};

struct RawTensor {
  Shape shape;
  std::vector<double> values;  // widened; f32 -> f64 is exact
};

template <class T>
void write_table(Writer& w, const NamedTensors<T>& table) {
  w.pod<std::uint64_t>(table.size());
  for (const auto& [name, t] : table) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.pod<std::uint8_t>(sizeof(T) == 4 ? 0 : 1);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.pod<std::uint64_t>(e);
    w.bytes(t.data().data(), t.numel() * sizeof(T));
  }
}

inline std::vector<std::pair<std::string, RawTensor>> read_table(Reader& r) {
  const auto count = r.pod<std::uint64_t>("tensor count");
  std::vector<std::pair<std::string, RawTensor>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint32_t>("tensor name length");
    if (len > (1u << 16)) throw FormatError("checkpoint '" + r.path + "': implausible tensor name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    const auto dtype = r.pod<std::uint8_t>("dtype tag");
    if (dtype > 1) throw FormatError("checkpoint '" + r.path + "': tensor '" + name + "' has unknown dtype tag");
    const auto rank = r.pod<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("checkpoint '" + r.path + "': tensor '" + name + "' has implausible rank");
    RawTensor t;
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.pod<std::uint64_t>("extent"));
    const std::size_t n = numel_of(t.shape);
    t.values.resize(n);
    if (dtype == 0) {
      std::vector<float> buf(n);
      r.bytes(buf.data(), n * 4, "tensor payload");
      std::copy(buf.begin(), buf.end(), t.values.begin());
    } else {
      r.bytes(t.values.data(), n * 8, "tensor payload");
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

template <class T>
void assign_table(const std::vector<std::pair<std::string, RawTensor>>& src, ParamSet<T> dst, const std::string& path,
                  const char* which) {
  std::map<std::string, const RawTensor*> by_name;
  for (const auto& [name, t] : src)
    if (!by_name.emplace(name, &t).second)
      throw FormatError("checkpoint '" + path + "': duplicate tensor '" + name + "' in " + which + " table");
  std::size_t matched = 0;
  auto fill = [&](NamedTensors<T>& table) {
    for (auto& [name, t] : table) {
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw ConfigMismatchError("checkpoint '" + path + "': " + which + " table lacks tensor '" + name + "'");
      if (it->second->shape != t.shape())
        throw ShapeMismatchError("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                                 shape_str(it->second->shape) + ", model expects " + shape_str(t.shape()));
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(it->second->values[i]);
      ++matched;
    }
  };
  fill(dst.params);
  fill(dst.buffers);
  if (matched != by_name.size())
    throw ConfigMismatchError("checkpoint '" + path + "': " + which + " table has " +
                              std::to_string(by_name.size() - matched) + " tensor(s) the model does not know");
}

/// Architecture-defining part of a config. Name, note and seed do not change
/// the tensor layout and are ignored when matching.
inline nlohmann::json architecture(const ModelConfig& c) {
  auto j = c.to_json();
  j.erase("name");
  j.erase("note");
  j.erase("seed");
  return j;
}

}  // namespace ckpt

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path, std::uint64_t step = 0,
                     const Model<T>* ema = nullptr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  ckpt::Writer w{out};
  w.bytes(kCheckpointMagic, 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = model.config().dump();
  w.pod<std::uint64_t>(cfg.size());
  w.bytes(cfg.data(), cfg.size());
  auto flat = [](const Model<T>& m) {
    auto ps = m.named_tensors();
    NamedTensors<T> all = ps.params;
    all.insert(all.end(), ps.buffers.begin(), ps.buffers.end());
    return all;
  };
  ckpt::write_table(w, flat(model));
  w.pod<std::uint64_t>(step);
  w.pod<std::uint8_t>(ema ? 1 : 0);
  if (ema) ckpt::write_table(w, flat(*ema));
  out.flush();
  if (!out) throw FormatError("checkpoint: write to '" + path + "' failed");
}

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  std::uint64_t step = 0;
  std::optional<Model<T>> ema;
};

namespace ckpt {

struct Parsed {
  ModelConfig config;
  std::vector<std::pair<std::string, RawTensor>> params;
  std::uint64_t step = 0;
  std::optional<std::vector<std::pair<std::string, RawTensor>>> ema;
};

inline Parsed parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  Reader r{in, path};
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw BadMagicError("checkpoint '" + path + "': not a DMF1 checkpoint (bad magic bytes)");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint '" + path + "': format version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = r.pod<std::uint64_t>("config length");
  if (cfg_len > (1u << 24)) throw FormatError("checkpoint '" + path + "': implausible config length");
  std::string cfg_text(cfg_len, '\0');
  r.bytes(cfg_text.data(), cfg_len, "config text");
  Parsed p;
  try {
    p.config = ModelConfig::parse(cfg_text);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint '" + path + "': embedded config is invalid: " + e.what());
  }
  p.params = read_table(r);
  p.step = r.pod<std::uint64_t>("training step");
  const auto flag = r.pod<std::uint8_t>("EMA flag");
  if (flag > 1) throw FormatError("checkpoint '" + path + "': bad EMA flag");
  if (flag == 1) p.ema = read_table(r);
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError("checkpoint '" + path + "': trailing bytes after the last table");
  return p;
}

}  // namespace ckpt

/// Rebuilds the model from the embedded config and restores every tensor.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  auto p = ckpt::parse_file(path);
  LoadedCheckpoint<T> out{Model<T>(p.config), p.step, std::nullopt};
  ckpt::assign_table(p.params, out.model.named_tensors(), path, "parameter");
  if (p.ema) {
    out.ema.emplace(p.config);
    ckpt::assign_table(*p.ema, out.ema->named_tensors(), path, "EMA");
  }
  return out;
}

/// Restores tensors into an existing model whose architecture must match the
/// checkpoint's embedded config. Returns the stored step.
template <class T>
std::uint64_t load_into(Model<T>& model, const std::string& path, Model<T>* ema = nullptr) {
  auto p = ckpt::parse_file(path);
  if (ckpt::architecture(p.config) != ckpt::architecture(model.config()))
    throw ConfigMismatchError("checkpoint '" + path + "': stored config '" + p.config.name +
                              "' does not match the model's architecture");
  ckpt::assign_table(p.params, model.named_tensors(), path, "parameter");
  if (ema) {
    if (!p.ema) throw ConfigMismatchError("checkpoint '" + path + "': no EMA table stored");
    ckpt::assign_table(*p.ema, ema->named_tensors(), path, "EMA");
  }
  return p.step;
}

}  // namespace dmf
