#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/nn.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

// Binary layout, all integers little-endian u32:
//   "STTR" | version | count | count x (name_len | name bytes | rank | dims... | f32 data...)
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'T', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { io, corrupt, version_mismatch, shape_mismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

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

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::corrupt, "checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<unsigned char> serialize_checkpoint(const std::vector<NamedTensor<T>>& entries) {
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : e.tensor.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline std::vector<NamedTensor<float>> parse_checkpoint(const std::vector<unsigned char>& bytes) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader in(bytes);
  if (in.str(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError(Kind::corrupt, "bad checkpoint magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  std::vector<NamedTensor<float>> entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = in.u32();
    std::string name = in.str(name_len);
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 8) throw CheckpointError(Kind::corrupt, "bad rank for " + name);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32();
      if (d == 0) throw CheckpointError(Kind::corrupt, "zero dimension in " + name);
      shape.push_back(d);
      numel *= d;
    }
    if (numel * 4 > in.remaining()) throw CheckpointError(Kind::corrupt, "checkpoint truncated in " + name);
    std::vector<float> data(numel);
    for (auto& v : data) v = std::bit_cast<float>(in.u32());
    entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!in.at_end()) throw CheckpointError(Kind::corrupt, "trailing bytes after checkpoint");
  return entries;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& entries) {
  const auto bytes = serialize_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "failed writing checkpoint " + path.string());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& store) {
  save_checkpoint(path, store.entries());
}

inline std::vector<NamedTensor<float>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot read checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Copies checkpoint values into a store after validating every name and
/// shape; the store is untouched when validation fails.
template <typename T>
void apply_checkpoint(ParameterStore<T>& store, const std::vector<NamedTensor<float>>& entries) {
  using Kind = CheckpointError::Kind;
  std::vector<const NamedTensor<float>*> matched;
  for (const auto& dst : store.entries()) {
    const NamedTensor<float>* src = nullptr;
    for (const auto& e : entries)
      if (e.name == dst.name) src = &e;
    if (!src) throw CheckpointError(Kind::shape_mismatch, "checkpoint is missing tensor " + dst.name);
    if (src->tensor.shape() != dst.tensor.shape()) {
      throw CheckpointError(Kind::shape_mismatch, "shape mismatch for " + dst.name + ": checkpoint " +
                                                      shape_str(src->tensor.shape()) + ", model " +
                                                      shape_str(dst.tensor.shape()));
    }
    matched.push_back(src);
  }
  if (entries.size() != store.size()) {
    for (const auto& e : entries)
      if (!store.find(e.name).defined()) {
        throw CheckpointError(Kind::shape_mismatch, "checkpoint has unexpected tensor " + e.name);
      }
  }
  for (std::size_t i = 0; i < matched.size(); ++i) {
    auto dst = store.entries()[i].tensor;
    auto out = dst.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(matched[i]->tensor[j]);
  }
}

}  // namespace sttr
