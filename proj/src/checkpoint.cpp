#include "cfm/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "cfm/binary_io.hpp"
#include "cfm/error.hpp"

namespace cfm {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace io

void ParamSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(tensor));
}

void ParamSet::append(const ParamSet& other) {
  for (const auto& [name, t] : other) add(name, t);
}

const Tensor& ParamSet::get(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ContractError("unknown parameter '" + std::string(name) + "'");
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() const {
  for (const auto& [name, t] : entries_) {
    Tensor handle = t;
    handle.zero_grad();
  }
}

void ParamSet::copy_values_from(const ParamSet& other) const {
  for (const auto& [name, t] : entries_) {
    const Tensor& src = other.get(name);
    if (src.shape() != t.shape()) throw ShapeError("parameter '" + name + "' shape mismatch");
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.data_mut().begin());
  }
}

ParamSet ParamSet::with_prefix(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [name, t] : entries_) {
    if (name.starts_with(prefix)) out.add(name, t);
  }
  return out;
}

std::uint64_t weight_hash(const ParamSet& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    feed(name.data(), name.size());
    for (auto d : t.shape()) feed(&d, sizeof(d));
    feed(t.data().data(), t.data().size_bytes());
  }
  return h;
}

void write_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CFMW"), 4));
  w.put<std::uint8_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(t.numel());
    w.put_array(t.data());
  }
  io::write_file(path, w.bytes());
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' not found");
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  char magic[4];
  r.get_bytes(std::span<std::uint8_t>(reinterpret_cast<std::uint8_t*>(magic), 4), "magic");
  if (std::string_view(magic, 4) != "CFMW") throw FormatError(0, "bad checkpoint magic");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(4, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get_count<std::uint32_t>(4 + 4 + 8, "record count");
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.get_string("name");
    const auto ndim = r.get_count<std::uint32_t>(8, "ndim");
    if (ndim == 0) throw FormatError(r.offset() - 4, "zero-rank record '" + rec.name + "'");
    Shape shape(ndim);
    for (auto& d : shape) d = r.get<std::uint64_t>("dimension");
    const auto at = r.offset();
    const auto n = r.get_count<std::uint64_t>(4, "element count");
    if (n != shape_numel(shape)) throw FormatError(at, "element count disagrees with shape for '" + rec.name + "'");
    std::vector<float> data(n);
    r.get_array(std::span<float>(data), "payload");
    rec.tensor = Tensor(std::move(shape), std::move(data));
    records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after last record");
  return records;
}

void load_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  const auto records = read_checkpoint(path);
  for (const auto& [name, t] : params) {
    auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.name == name; });
    if (it == records.end()) throw FormatError(0, "checkpoint '" + path.string() + "' lacks record '" + name + "'");
    if (it->tensor.shape() != t.shape()) {
      throw FormatError(0, "record '" + name + "' has shape " + shape_str(it->tensor.shape()) + ", expected " +
                               shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), dst.data_mut().begin());
  }
}

}  // namespace cfm
