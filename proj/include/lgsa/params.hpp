// Named parameter store and the binary checkpoint format.
//
// Checkpoint layout (little-endian):
//   "LGSA" | u32 version | u32 entry count
//   per entry: u16 name length | name bytes | u8 rank | u32 dims[rank] | f32 values
//   trailer:   u32 descriptor length | descriptor bytes (key=value lines)
// Readers that stop after the entry list see a complete file; the trailer
// carries the architecture descriptor used to validate reloads.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgsa/tensor.hpp"

namespace lgsa {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Tensor<T>& add(const std::string& name, Shape shape, bool trainable = true, T fill = T(0)) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>::full(std::move(shape), fill, trainable), trainable});
    return entries_.back().tensor;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Deep copy of all values (gradients are not copied).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& e : entries_) {
      out.add(e.name, e.tensor.shape(), e.trainable);
      out.get(e.name).values() = e.tensor.values();
    }
    return out;
  }

  /// Copies values from a store with identical names and shapes.
  void assign_from(const ParamStore& other) {
    for (auto& e : entries_) {
      const auto& src = other.get(e.name);
      if (src.shape() != e.tensor.shape()) {
        throw ShapeError("parameter " + e.name + ": shape " + shape_str(src.shape()) +
                         " does not match " + shape_str(e.tensor.shape()));
      }
      e.tensor.values() = src.values();
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string what) : buf_(std::move(bytes)), what_(std::move(what)) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <typename V>
  void array(V* out, std::size_t n) {
    need(n * sizeof(V));
    std::memcpy(out, buf_.data() + pos_, n * sizeof(V));
    pos_ += n * sizeof(V);
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) {
      throw FormatError(what_ + ": truncated file, expected at least " + std::to_string(pos_ + n) +
                        " bytes but found " + std::to_string(buf_.size()));
    }
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace io

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const std::string& descriptor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("LGSA", 4);
  io::put<std::uint32_t>(os, io::kCheckpointVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    io::put<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (T v : e.tensor.data()) io::put<float>(os, static_cast<float>(v));
  }
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(descriptor.size()));
  os.write(descriptor.data(), static_cast<std::streamsize>(descriptor.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  std::string descriptor;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  io::Reader r(io::read_file(path), path);
  if (r.str(4) != "LGSA") throw FormatError(path + ": bad magic, not an LGSA checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != io::kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint32_t>());
    e.values.resize(shape_numel(e.shape));
    r.array(e.values.data(), e.values.size());
    ck.entries.push_back(std::move(e));
  }
  if (r.remaining() >= 4) ck.descriptor = r.str(r.get<std::uint32_t>());
  return ck;
}

/// Loads checkpoint values into a store built for the same architecture.
template <typename T>
void load_into(const Checkpoint& ck, ParamStore<T>& params) {
  if (ck.entries.size() != params.entries().size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.entries.size()) +
                      " entries, model expects " + std::to_string(params.entries().size()));
  }
  for (const auto& e : ck.entries) {
    if (!params.contains(e.name)) throw FormatError("checkpoint entry not in model: " + e.name);
    auto& t = params.get(e.name);
    if (t.shape() != e.shape) {
      throw FormatError("checkpoint entry " + e.name + " has shape " + shape_str(e.shape) +
                        ", model expects " + shape_str(t.shape()));
    }
    std::transform(e.values.begin(), e.values.end(), t.values().begin(),
                   [](float v) { return static_cast<T>(v); });
  }
}

}  // namespace lgsa
