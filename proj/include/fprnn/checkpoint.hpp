#pragma once

// FPRNN1 checkpoints: "FPRNN1", version byte, u32 entry count, then entries
//   u32 name length, name, u8 dtype (0 f32, 1 f64, 2 utf8), u8 rank,
//   rank x u32 dims, little-endian payload.
// The config travels as a utf8 entry named "__config__".

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fprnn/numerics.hpp"

namespace fprnn {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, utf8 = 2 };

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "FPRNN1";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointEntry {
  DType dtype = DType::f64;
  std::vector<std::uint32_t> dims;
  Mat value;         // numeric entries
  std::string text;  // utf8 entries
};

struct Checkpoint {
  std::map<std::string, CheckpointEntry> entries;
  std::vector<std::string> order;

  void put(const std::string& name, const Mat& m, bool f64) {
    CheckpointEntry e;
    e.dtype = f64 ? DType::f64 : DType::f32;
    e.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
    e.value = m;
    if (!entries.contains(name)) order.push_back(name);
    entries[name] = std::move(e);
  }

  void put_text(const std::string& name, std::string s) {
    CheckpointEntry e;
    e.dtype = DType::utf8;
    e.dims = {static_cast<std::uint32_t>(s.size())};
    e.text = std::move(s);
    if (!entries.contains(name)) order.push_back(name);
    entries[name] = std::move(e);
  }

  const CheckpointEntry& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint: missing entry '" + name + "'");
    return it->second;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put_le(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic, 6);
  detail::put_le<std::uint8_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.order.size()));
  for (const auto& name : ck.order) {
    const CheckpointEntry& e = ck.entries.at(name);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_le<std::uint32_t>(os, d);
    switch (e.dtype) {
      case DType::utf8: os.write(e.text.data(), static_cast<std::streamsize>(e.text.size())); break;
      case DType::f64:
        for (double v : e.value.data) detail::put_le<double>(os, v);
        break;
      case DType::f32:
        for (double v : e.value.data) detail::put_le<float>(os, static_cast<float>(v));
        break;
    }
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[6] = {};
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kCheckpointMagic, 6) != 0) throw CheckpointError("checkpoint: bad magic");
  const auto version = detail::get_le<std::uint8_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is);
    if (len > (1u << 16)) throw CheckpointError("checkpoint: implausible name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto tag = detail::get_le<std::uint8_t>(is);
    if (tag > 2) throw CheckpointError("checkpoint: unknown dtype " + std::to_string(tag));
    const auto rank = detail::get_le<std::uint8_t>(is);
    std::vector<std::uint32_t> dims(rank);
    std::uint64_t n = 1;
    for (auto& d : dims) n *= (d = detail::get_le<std::uint32_t>(is));
    const auto dtype = static_cast<DType>(tag);
    if (dtype == DType::utf8) {
      if (rank != 1) throw CheckpointError("checkpoint: text entry '" + name + "' must have rank 1");
      std::string s(dims[0], '\0');
      is.read(s.data(), dims[0]);
      if (!is) throw CheckpointError("checkpoint: truncated file");
      ck.put_text(name, std::move(s));
      continue;
    }
    if (rank != 2) throw CheckpointError("checkpoint: tensor '" + name + "' must have rank 2");
    if (n > (std::uint64_t{1} << 32)) throw CheckpointError("checkpoint: implausible tensor size");
    Mat m(dims[0], dims[1]);
    for (auto& v : m.data) v = dtype == DType::f64 ? detail::get_le<double>(is) : detail::get_le<float>(is);
    ck.put(name, m, dtype == DType::f64);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + tmp);
    write_checkpoint(os, ck);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("checkpoint: cannot move into " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace fprnn
