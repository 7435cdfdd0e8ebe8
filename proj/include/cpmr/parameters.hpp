#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "cpmr/error.hpp"
#include "cpmr/tensor.hpp"

namespace cpmr {

// Named learnable tensors, iterated in name order.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  Tensor& add(const std::string& name, Tensor value) {
    auto [it, inserted] = map_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return map_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : map_) n += t.size();
    return n;
  }

  Map::iterator begin() { return map_.begin(); }
  Map::iterator end() { return map_.end(); }
  Map::const_iterator begin() const { return map_.begin(); }
  Map::const_iterator end() const { return map_.end(); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.map_ == b.map_; }

 private:
  Map map_;
};

// Checkpoint layout: a text manifest
//
//   CPMR-CHECKPOINT
//   version 1
//   meta <key> <value>            (zero or more)
//   param <name> <rows> <cols> f64le   (one per parameter, name order)
//   end
//
// followed by the raw little-endian float64 blocks in manifest order.
struct Checkpoint {
  static constexpr const char* kMagic = "CPMR-CHECKPOINT";
  static constexpr int kVersion = 1;

  ParameterSet params;
  std::map<std::string, std::string> meta;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << Checkpoint::kMagic << '\n' << "version " << Checkpoint::kVersion << '\n';
  for (const auto& [k, v] : ck.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("checkpoint meta entry '" + k + "' contains whitespace/newline");
    }
    os << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& [name, t] : ck.params) {
    os << "param " << name << ' ' << t.rows() << ' ' << t.cols() << " f64le\n";
  }
  os << "end\n";
  for (const auto& [name, t] : ck.params) {
    for (double v : t.values()) {
      std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!os) throw CheckpointError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != Checkpoint::kMagic) throw CheckpointError("bad checkpoint magic");
  if (!std::getline(is, line) || line != "version " + std::to_string(Checkpoint::kVersion)) {
    throw CheckpointError("unsupported checkpoint version: '" + line + "'");
  }
  Checkpoint ck;
  struct Entry {
    std::string name;
    std::size_t rows, cols;
  };
  std::vector<Entry> entries;
  while (true) {
    if (!std::getline(is, line)) throw CheckpointError("truncated checkpoint manifest");
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      ck.meta[key] = value;
    } else if (kind == "param") {
      Entry e;
      std::string dtype;
      if (!(ls >> e.name >> e.rows >> e.cols >> dtype) || dtype != "f64le") {
        throw CheckpointError("bad manifest line: '" + line + "'");
      }
      entries.push_back(e);
    } else {
      throw CheckpointError("bad manifest line: '" + line + "'");
    }
  }
  for (const auto& e : entries) {
    Tensor t(e.rows, e.cols);
    for (double& v : t.values()) {
      std::uint64_t bits = 0;
      if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        throw CheckpointError("truncated value block for '" + e.name + "'");
      }
      v = std::bit_cast<double>(detail::to_le(bits));
    }
    ck.params.add(e.name, std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after value blocks");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace cpmr
