#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "serpent/error.hpp"
#include "serpent/params.hpp"

// Checkpoint layout ("SPT1"): magic, u32 entry count, then per entry
// u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 values.
// All integers and floats little-endian; entries sorted by name.

namespace serpent {

struct CheckpointEntry {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw DataError(path_ + ": truncated checkpoint at byte " + std::to_string(pos_));
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out{'S', 'P', 'T', '1'};
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, entry] : ckpt) {  // std::map iterates in sorted order
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(entry.dims.size()));
    for (auto d : entry.dims) detail::put_u32(out, d);
    for (float v : entry.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& path = "<memory>") {
  detail::ByteReader in(bytes, path);
  if (in.str(4) != "SPT1") throw DataError(path + ": bad checkpoint magic at byte 0");
  const std::uint32_t count = in.u32();
  Checkpoint ckpt;
  std::string previous;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = in.pos();
    std::string name = in.str(in.u32());
    if (e > 0 && !(previous < name))
      throw DataError(path + ": entries not sorted or duplicated at byte " + std::to_string(at));
    CheckpointEntry entry;
    const std::uint32_t rank = in.u32();
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      entry.dims.push_back(in.u32());
      numel *= entry.dims.back();
    }
    in.need(numel * 4);
    entry.values.resize(numel);
    for (auto& v : entry.values) v = std::bit_cast<float>(in.u32());
    previous = name;
    ckpt.emplace(std::move(name), std::move(entry));
  }
  if (!in.at_end()) throw DataError(path + ": trailing bytes after checkpoint at byte " + std::to_string(in.pos()));
  return ckpt;
}

inline Checkpoint to_checkpoint(const ParamList<float>& params) {
  require_unique_names(params);
  Checkpoint ckpt;
  for (const auto& p : params) {
    CheckpointEntry entry;
    for (int i = 0; i < p.tensor.rank(); ++i) entry.dims.push_back(static_cast<std::uint32_t>(p.tensor.dim(i)));
    entry.values.assign(p.tensor.data().begin(), p.tensor.data().end());
    ckpt.emplace(p.name, std::move(entry));
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamList<float>& params) {
  const auto bytes = encode_checkpoint(to_checkpoint(params));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

/// Copies checkpoint values into `params`. Names and shapes must match
/// exactly; the first mismatching tensor is named in the error.
inline void apply_checkpoint(const Checkpoint& ckpt, ParamList<float>& params) {
  for (auto& p : params) {
    auto it = ckpt.find(p.name);
    if (it == ckpt.end()) throw DataError("checkpoint is missing tensor " + p.name);
    std::vector<std::uint32_t> dims;
    for (int i = 0; i < p.tensor.rank(); ++i) dims.push_back(static_cast<std::uint32_t>(p.tensor.dim(i)));
    if (dims != it->second.dims) throw DataError("checkpoint shape mismatch for tensor " + p.name);
  }
  if (ckpt.size() != params.size()) {
    for (const auto& [name, entry] : ckpt) {
      const bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.name == name; });
      if (!known) throw DataError("checkpoint has unexpected tensor " + name);
    }
  }
  for (auto& p : params) {
    const auto& src = ckpt.at(p.name).values;
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
  }
}

}  // namespace serpent
