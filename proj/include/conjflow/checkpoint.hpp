#pragma once

// Versioned binary checkpoint: named numeric arrays and named byte blobs.
//
//   "CJFLCKPT" | u32 version | u64 config hash | u32 entry count
//   entry: u8 kind (0 array, 1 blob) | u32 name length | name
//          array: u32 element size | u64 count | raw elements
//          blob:  u64 length | bytes
//
// Integers and floats are stored in host byte order (little-endian targets).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace conjflow {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'J', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Checkpoint {
 public:
  std::uint64_t config_hash = 0;

  template <typename T>
  void put_array(const std::string& name, std::span<const T> values) {
    Array a;
    a.elem_size = sizeof(T);
    a.bytes.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(a.bytes.data(), values.data(), values.size_bytes());
    arrays_[name] = std::move(a);
  }

  template <typename T>
  std::vector<T> get_array(const std::string& name) const {
    const auto it = arrays_.find(name);
    if (it == arrays_.end()) throw CheckpointError("checkpoint has no array '" + name + "'");
    if (it->second.elem_size != sizeof(T))
      throw CheckpointError("checkpoint array '" + name + "' has element size " + std::to_string(it->second.elem_size) +
                            ", expected " + std::to_string(sizeof(T)));
    std::vector<T> out(it->second.bytes.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), it->second.bytes.data(), it->second.bytes.size());
    return out;
  }

  /// Copies into an existing vector, checking the length.
  template <typename T>
  void get_into(const std::string& name, std::vector<T>& dst) const {
    std::vector<T> v = get_array<T>(name);
    if (v.size() != dst.size())
      throw CheckpointError("checkpoint array '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                            std::to_string(dst.size()));
    dst = std::move(v);
  }

  void put_u64(const std::string& name, std::uint64_t v) { put_array<std::uint64_t>(name, std::span<const std::uint64_t>(&v, 1)); }
  std::uint64_t get_u64(const std::string& name) const {
    const auto v = get_array<std::uint64_t>(name);
    if (v.size() != 1) throw CheckpointError("checkpoint scalar '" + name + "' malformed");
    return v[0];
  }

  void put_blob(const std::string& name, const std::string& bytes) { blobs_[name] = bytes; }
  const std::string& get_blob(const std::string& name) const {
    const auto it = blobs_.find(name);
    if (it == blobs_.end()) throw CheckpointError("checkpoint has no blob '" + name + "'");
    return it->second;
  }
  bool has_blob(const std::string& name) const { return blobs_.count(name) > 0; }
  bool has_array(const std::string& name) const { return arrays_.count(name) > 0; }

  void save(const std::filesystem::path& path) const {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw CheckpointError("cannot write " + tmp.string());
      os.write(kCheckpointMagic, 8);
      put(os, kCheckpointVersion);
      put(os, config_hash);
      put(os, static_cast<std::uint32_t>(arrays_.size() + blobs_.size()));
      for (const auto& [name, a] : arrays_) {
        put(os, std::uint8_t{0});
        put_name(os, name);
        put(os, a.elem_size);
        put(os, static_cast<std::uint64_t>(a.bytes.size() / a.elem_size));
        os.write(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
      }
      for (const auto& [name, b] : blobs_) {
        put(os, std::uint8_t{1});
        put_name(os, name);
        put(os, static_cast<std::uint64_t>(b.size()));
        os.write(b.data(), static_cast<std::streamsize>(b.size()));
      }
      if (!os) throw CheckpointError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  /// Loads a checkpoint; a non-zero `expected_hash` must match the stored one.
  static Checkpoint load(const std::filesystem::path& path, std::uint64_t expected_hash = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot read " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint: " + path.string());
    const auto version = get<std::uint32_t>(is);
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config_hash = get<std::uint64_t>(is);
    if (expected_hash != 0 && c.config_hash != expected_hash)
      throw CheckpointError("checkpoint was written with a different configuration (hash mismatch)");
    const auto n = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto kind = get<std::uint8_t>(is);
      const std::string name = get_name(is);
      if (kind == 0) {
        Array a;
        a.elem_size = get<std::uint32_t>(is);
        const auto count = get<std::uint64_t>(is);
        if (a.elem_size == 0 || a.elem_size > 16 || count > (1ull << 36)) throw CheckpointError("corrupt checkpoint array");
        a.bytes.resize(count * a.elem_size);
        is.read(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
        c.arrays_[name] = std::move(a);
      } else if (kind == 1) {
        const auto len = get<std::uint64_t>(is);
        if (len > (1ull << 32)) throw CheckpointError("corrupt checkpoint blob");
        std::string b(len, '\0');
        is.read(b.data(), static_cast<std::streamsize>(len));
        c.blobs_[name] = std::move(b);
      } else {
        throw CheckpointError("corrupt checkpoint entry");
      }
      if (!is) throw CheckpointError("truncated checkpoint: " + path.string());
    }
    return c;
  }

 private:
  struct Array {
    std::uint32_t elem_size = 1;
    std::vector<char> bytes;
  };

  template <typename U>
  static void put(std::ostream& os, U v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  template <typename U>
  static U get(std::istream& is) {
    U v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!is) throw CheckpointError("truncated checkpoint");
    return v;
  }
  static void put_name(std::ostream& os, const std::string& s) {
    put(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static std::string get_name(std::istream& is) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("corrupt checkpoint name");
    std::string s(len, '\0');
    is.read(s.data(), len);
    return s;
  }

  std::map<std::string, Array> arrays_;
  std::map<std::string, std::string> blobs_;
};

}  // namespace conjflow
