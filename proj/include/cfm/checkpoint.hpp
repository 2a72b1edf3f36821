#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cfm/tensor.hpp"

namespace cfm {

// Ordered registry of named parameter tensors. Order is registration order and
// defines the checkpoint record order.
class ParamSet {
 public:
  void add(std::string name, Tensor tensor);
  void append(const ParamSet& other);

  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() const;
  // Copies values (not handles) from `other`; names and shapes must match.
  void copy_values_from(const ParamSet& other) const;
  // Subset whose names start with `prefix`.
  ParamSet with_prefix(std::string_view prefix) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// FNV-1a over names, shapes and raw bytes of every parameter.
std::uint64_t weight_hash(const ParamSet& params);

// Checkpoint file layout (all integers little-endian):
//   magic "CFMW" | version u8 (=1) | record count u32
//   per record: name length u32 | name bytes (UTF-8) | ndim u32 | dims u64[ndim]
//               | element count u64 | f32 payload
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor tensor;
};

void write_checkpoint(const std::filesystem::path& path, const ParamSet& params);
std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);
// Reads a checkpoint and overwrites the values of every parameter in `params`.
// Records missing from the file, or with another shape, raise a FormatError.
// Extra records in the file are ignored.
void load_checkpoint(const std::filesystem::path& path, const ParamSet& params);

}  // namespace cfm
