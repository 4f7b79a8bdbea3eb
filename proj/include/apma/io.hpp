// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_IO_HPP
#define APMA_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "apma/tensor.hpp"

namespace apma {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t n, std::string what)
      : p_(data), n_(n), what_(std::move(what)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, p_ + off_, sizeof(U));
    off_ += sizeof(U);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* out = p_ + off_;
    off_ += n;
    return out;
  }
  std::size_t remaining() const { return n_ - off_; }
  std::size_t offset() const { return off_; }

 private:
  void need(std::size_t n) const {
    if (n > n_ - off_)
      throw FormatError(what_ + ": truncated at byte " + std::to_string(off_));
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset file: "APMD", u32 version, u32 count, u32 H, u32 W, u32 channels,
// u32 num_classes, pixels (count*H*W*channels bytes), labels (count bytes).

struct Dataset {
  std::uint32_t height = 0, width = 0, channels = 1, num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_bytes() const { return std::size_t(height) * width * channels; }

  /// Images [first, first + n) scaled to [0, 1], shape n x H x W x channels.
  Tensor<float> images(std::size_t first, std::size_t n) const {
    Tensor<float> out({n, height, width, channels});
    const std::size_t sz = image_bytes();
    for (std::size_t i = 0; i < n * sz; ++i) out[i] = pixels[first * sz + i] / 255.0f;
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

inline constexpr std::uint32_t kFormatVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  if (d.pixels.size() != d.count() * d.image_bytes())
    throw FormatError("dataset pixel payload does not match header counts");
  detail::Writer w;
  w.bytes("APMD", 4);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.count()));
  w.put(d.height);
  w.put(d.width);
  w.put(d.channels);
  w.put(d.num_classes);
  w.bytes(d.pixels.data(), d.pixels.size());
  w.bytes(d.labels.data(), d.labels.size());
  return std::move(w.buffer());
}

inline Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes.data(), bytes.size(), "dataset");
  if (std::memcmp(r.take(4), "APMD", 4) != 0) throw FormatError("dataset: bad magic");
  if (r.get<std::uint32_t>() != kFormatVersion) throw FormatError("dataset: unsupported version");
  Dataset d;
  const auto count = r.get<std::uint32_t>();
  d.height = r.get<std::uint32_t>();
  d.width = r.get<std::uint32_t>();
  d.channels = r.get<std::uint32_t>();
  d.num_classes = r.get<std::uint32_t>();
  const std::uint64_t px = std::uint64_t(count) * d.height * d.width * d.channels;
  if (r.remaining() != px + count)
    throw FormatError("dataset: header counts do not match payload length");
  const auto* p = r.take(px);
  d.pixels.assign(p, p + px);
  const auto* l = r.take(count);
  d.labels.assign(l, l + count);
  for (auto y : d.labels)
    if (y >= d.num_classes)
      throw FormatError("dataset: label " + std::to_string(y) + " >= num_classes");
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  detail::write_file_atomic(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Checkpoint file: "APMC", u32 version, u8 phase, u32 tensor count, then per
// tensor u16 name length, name, u8 dtype (0 f32, 1 u8), u8 rank, u32 dims,
// payload; trailing u64 FNV-1a of everything before it.

enum class Phase : std::uint8_t { searched = 0, refined = 1, compacted = 2 };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::searched: return "searched";
    case Phase::refined: return "refined";
    case Phase::compacted: return "compacted";
  }
  return "?";
}

using StoredTensor = std::variant<Tensor<float>, Tensor<std::uint8_t>>;

struct Checkpoint {
  Phase phase = Phase::searched;
  std::map<std::string, StoredTensor> tensors;

  const Tensor<float>& f32(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end() || !std::holds_alternative<Tensor<float>>(it->second))
      throw FormatError("checkpoint lacks f32 tensor '" + name + "'");
    return std::get<Tensor<float>>(it->second);
  }
  const Tensor<std::uint8_t>& u8(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end() || !std::holds_alternative<Tensor<std::uint8_t>>(it->second))
      throw FormatError("checkpoint lacks u8 tensor '" + name + "'");
    return std::get<Tensor<std::uint8_t>>(it->second);
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  void put_text(const std::string& name, const std::string& text) {
    Tensor<std::uint8_t> t({text.size()});
    std::memcpy(t.data(), text.data(), text.size());
    tensors[name] = std::move(t);
  }
  std::string text(const std::string& name) const {
    const auto& t = u8(name);
    return std::string(reinterpret_cast<const char*>(t.data()), t.size());
  }

  bool operator==(const Checkpoint&) const = default;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes("APMC", 4);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(ck.phase));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, stored] : ck.tensors) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    std::visit(
        [&](const auto& t) {
          using V = typename std::decay_t<decltype(t)>::value_type;
          w.put<std::uint8_t>(std::is_same_v<V, float> ? 0 : 1);
          if (t.rank() > 0xff) throw FormatError("tensor rank too large");
          w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
          for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
          w.bytes(t.data(), t.size() * sizeof(V));
        },
        stored);
  }
  auto& buf = w.buffer();
  const std::uint64_t sum = fnv1a64(buf.data(), buf.size());
  w.put(sum);
  return std::move(buf);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint: truncated");
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_sum)
    throw FormatError("checkpoint: checksum mismatch");
  detail::Reader r(bytes.data(), bytes.size() - 8, "checkpoint");
  if (std::memcmp(r.take(4), "APMC", 4) != 0) throw FormatError("checkpoint: bad magic");
  if (r.get<std::uint32_t>() != kFormatVersion)
    throw FormatError("checkpoint: unsupported version");
  Checkpoint ck;
  const auto phase = r.get<std::uint8_t>();
  if (phase > 2) throw FormatError("checkpoint: unknown phase " + std::to_string(phase));
  ck.phase = static_cast<Phase>(phase);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const auto* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const std::size_t n = shape_size(shape);
    if (dtype == 0) {
      Tensor<float> t(shape);
      std::memcpy(t.data(), r.take(n * sizeof(float)), n * sizeof(float));
      ck.tensors.emplace(std::move(name), std::move(t));
    } else if (dtype == 1) {
      Tensor<std::uint8_t> t(shape);
      std::memcpy(t.data(), r.take(n), n);
      ck.tensors.emplace(std::move(name), std::move(t));
    } else {
      throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype));
    }
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes before checksum");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace apma

#endif  // APMA_IO_HPP
