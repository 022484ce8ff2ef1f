#pragma once

// File formats:
//  - volumes: <name>.vol (raw little-endian payload) + <name>.volmeta (text
//    sidecar: dims, channels, dtype, spacing).
//  - checkpoints: <prefix>.manifest (text: names, shapes, byte offsets) +
//    <prefix>.bin (raw little-endian float32 blob).  Round-trips are bit-exact.
//  - config: flat "section.key = value" text, unknown keys rejected.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "isoseg/errors.hpp"
#include "isoseg/tensor.hpp"
#include "isoseg/volume.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume and checkpoint payloads are little-endian");

namespace isoseg {

namespace detail {

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
  return "float32";
}
template <>
inline const char* dtype_name<std::uint8_t>() {
  return "uint8";
}

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode) {
  std::ifstream f(path, mode);
  if (!f) throw IoError("cannot open for reading: " + path);
  return f;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode) {
  std::ofstream f(path, mode);
  if (!f) throw IoError("cannot open for writing: " + path);
  return f;
}

}  // namespace detail

template <typename T>
void save_volume(const std::string& stem, const Volume<T>& v) {
  {
    auto meta = detail::open_out(stem + ".volmeta", std::ios::out);
    meta << "dims " << v.dims[0] << " " << v.dims[1] << " " << v.dims[2] << "\n"
         << "channels " << v.channels << "\n"
         << "dtype " << detail::dtype_name<T>() << "\n"
         << "spacing " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
    if (!meta) throw IoError("write failed: " + stem + ".volmeta");
  }
  auto raw = detail::open_out(stem + ".vol", std::ios::binary);
  raw.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!raw) throw IoError("write failed: " + stem + ".vol");
}

template <typename T>
Volume<T> load_volume(const std::string& stem) {
  Volume<T> v;
  std::string dtype;
  {
    auto meta = detail::open_in(stem + ".volmeta", std::ios::in);
    std::string line;
    while (std::getline(meta, line)) {
      std::istringstream ls(line);
      std::string key;
      if (!(ls >> key) || key.empty() || key[0] == '#') continue;
      if (key == "dims")
        ls >> v.dims[0] >> v.dims[1] >> v.dims[2];
      else if (key == "channels")
        ls >> v.channels;
      else if (key == "dtype")
        ls >> dtype;
      else if (key == "spacing")
        ls >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
      else
        throw IoError(stem + ".volmeta: unknown key '" + key + "'");
      if (ls.fail()) throw IoError(stem + ".volmeta: malformed value for '" + key + "'");
    }
  }
  if (dtype != detail::dtype_name<T>())
    throw IoError(stem + ".volmeta: dtype '" + dtype + "', expected '" +
                  detail::dtype_name<T>() + "'");
  if (v.voxels() == 0) throw IoError(stem + ".volmeta: zero-sized dims");
  const std::uintmax_t expect = v.size() * sizeof(T);
  const std::uintmax_t actual = std::filesystem::file_size(stem + ".vol");
  if (actual != expect)
    throw IoError(stem + ".vol: payload is " + std::to_string(actual) + " bytes, expected " +
                  std::to_string(expect) + " (dims x channels x dtype size)");
  v.data.resize(v.size());
  auto raw = detail::open_in(stem + ".vol", std::ios::binary);
  raw.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(expect));
  if (raw.gcount() != static_cast<std::streamsize>(expect))
    throw IoError(stem + ".vol: short read");
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoints.  A parameter store is a named, ordered collection of tensors
// plus per-channel buffer vectors (batch-norm running statistics).

template <typename S>
struct ParamStore {
  std::map<std::string, Tensor<S>> params;          // trainable
  std::map<std::string, std::vector<S>> buffers;    // running stats etc.

  Tensor<S>& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("unknown parameter '" + name + "'");
    return it->second;
  }
  std::vector<S>& buffer(const std::string& name) {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw InternalError("unknown buffer '" + name + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
};

template <typename S>
void save_checkpoint(const std::string& prefix, const ParamStore<S>& store) {
  auto manifest = detail::open_out(prefix + ".manifest", std::ios::out);
  auto blob = detail::open_out(prefix + ".bin", std::ios::binary);
  manifest << "format isoseg-checkpoint 1\n"
           << "dtype float32\n";
  std::size_t offset = 0;
  auto emit = [&](const std::string& kind, const std::string& name, const Shape5& shape,
                  const S* data, std::size_t n) {
    manifest << kind << " " << name;
    for (auto e : shape) manifest << " " << e;
    manifest << " " << offset << "\n";
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(data[i]);
    blob.write(reinterpret_cast<const char*>(out.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
    offset += n * sizeof(float);
  };
  for (const auto& [name, t] : store.params)
    emit("tensor", name, t.shape, t.data.data(), t.size());
  for (const auto& [name, b] : store.buffers)
    emit("buffer", name, Shape5{1, b.size(), 1, 1, 1}, b.data(), b.size());
  if (!manifest || !blob) throw IoError("checkpoint write failed: " + prefix);
}

template <typename S>
ParamStore<S> load_checkpoint(const std::string& prefix) {
  auto manifest = detail::open_in(prefix + ".manifest", std::ios::in);
  auto blob = detail::open_in(prefix + ".bin", std::ios::binary);
  ParamStore<S> store;
  std::string line;
  while (std::getline(manifest, line)) {
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind) || kind.empty() || kind[0] == '#') continue;
    if (kind == "format") {
      std::string name;
      int version = 0;
      ls >> name >> version;
      if (name != "isoseg-checkpoint" || version != 1)
        throw IoError(prefix + ".manifest: unsupported format '" + name + " " +
                      std::to_string(version) + "'");
    } else if (kind == "dtype") {
      std::string d;
      ls >> d;
      if (d != "float32") throw IoError(prefix + ".manifest: unsupported dtype '" + d + "'");
    } else if (kind == "tensor" || kind == "buffer") {
      std::string name;
      Shape5 shape;
      std::size_t offset;
      ls >> name >> shape[0] >> shape[1] >> shape[2] >> shape[3] >> shape[4] >> offset;
      if (ls.fail()) throw IoError(prefix + ".manifest: malformed line '" + line + "'");
      const std::size_t n = numel(shape);
      std::vector<float> raw(n);
      blob.seekg(static_cast<std::streamoff>(offset));
      blob.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
      if (blob.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
        throw IoError(prefix + ".bin: short read for '" + name + "'");
      if (kind == "tensor") {
        Tensor<S> t(shape);
        for (std::size_t i = 0; i < n; ++i) t.data[i] = static_cast<S>(raw[i]);
        store.params.emplace(name, std::move(t));
      } else {
        std::vector<S> b(n);
        for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<S>(raw[i]);
        store.buffers.emplace(name, std::move(b));
      }
    } else {
      throw IoError(prefix + ".manifest: unknown record '" + kind + "'");
    }
  }
  if (store.params.empty()) throw IoError(prefix + ".manifest: no tensors");
  return store;
}

// ---------------------------------------------------------------------------
// Flat sectioned config: lines of "section.key = value"; '#' comments.

class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path) {
    auto f = detail::open_in(path, std::ios::in);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>") {
    ConfigFile cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty() || value.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
      if (!cfg.values_.emplace(key, value).second)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                          "'");
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    used_.insert(key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    used_.insert(key);
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': '" + it->second + "' is not a number");
    }
  }

  long long get_int(const std::string& key, long long fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    used_.insert(key);
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': '" + it->second +
                        "' is not an integer");
    }
  }

  /// Fail-fast contract: every provided key must have been consumed.
  void reject_unknown_keys() const {
    for (const auto& [key, value] : values_)
      if (!used_.count(key))
        throw ConfigError(origin_ + ": unknown key '" + key + "'");
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
  std::string origin_;
};

inline void write_text_file(const std::string& path, const std::string& text) {
  auto f = detail::open_out(path, std::ios::out);
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace isoseg
