#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cfm/error.hpp"

namespace cfm::io {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

// Append-only little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked reader; every failure reports the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }

  template <typename T>
  T get(const char* what) {
    require(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  // Reads a u32/u64 count and checks that count · elem_size bytes remain;
  // a violation is reported at the offset of the count field itself.
  template <typename T>
  std::uint64_t get_count(std::uint64_t elem_size, const char* what) {
    const std::uint64_t at = pos_;
    const auto n = static_cast<std::uint64_t>(get<T>(what));
    if (elem_size != 0 && n > remaining() / elem_size) {
      throw FormatError(at, std::string(what) + " " + std::to_string(n) + " exceeds remaining " +
                                std::to_string(remaining()) + " bytes");
    }
    return n;
  }

  void get_bytes(std::span<std::uint8_t> out, const char* what) {
    require(out.size(), what);
    std::memcpy(out.data(), data_.data() + pos_, out.size());
    pos_ += out.size();
  }

  template <typename T>
  void get_array(std::span<T> out, const char* what) {
    require(out.size_bytes(), what);
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::string get_string(const char* what) {
    const auto n = get_count<std::uint32_t>(1, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void require(std::uint64_t n, const char* what) const {
    if (n > remaining()) throw FormatError(pos_, std::string("truncated while reading ") + what);
  }

  std::span<const std::uint8_t> data_;
  std::uint64_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace cfm::io
