#pragma once

// Checkpoint files: magic line, 8-byte little-endian manifest length, JSON
// manifest (config + tensor table), then raw little-endian float64 blobs in
// manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "adept/errors.hpp"
#include "adept/nn.hpp"
#include "adept/tensor.hpp"

namespace adept {

inline constexpr char kCheckpointMagic[] = "ADEPTCKPT1\n";

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw IoError("checkpoint has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }

  void add(const std::string& name, const Tensor& t) {
    tensors.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  }
  void add(const std::string& prefix, const nn::ParamList& params) {
    for (const auto& p : params) add(prefix + "." + p.name, p.tensor);
  }

  /// Writes stored values into existing parameter tensors (shape-checked).
  void load_into(const std::string& prefix, const nn::ParamList& params) const {
    for (const auto& p : params) {
      const auto& src = find(prefix + "." + p.name);
      if (src.shape != p.tensor.shape()) {
        throw ContractError("checkpoint tensor " + src.name + " has shape " + shape_str(src.shape) +
                            ", model expects " + shape_str(p.tensor.shape()));
      }
      Tensor dst = p.tensor;
      std::copy(src.values.begin(), src.values.end(), dst.data().begin());
    }
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["meta"] = ck.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ContractError("checkpoint: tensor " + t.name + " size mismatch");
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  const std::string m = manifest.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64_le(out, m.size());
  out += m;
  for (const auto& t : ck.tensors)
    for (double v : t.values) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
  const std::size_t magic = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic + 8 || bytes.compare(0, magic, kCheckpointMagic) != 0) {
    throw IoError(name + ": not a checkpoint file");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t mlen = detail::get_u64_le(p + magic);
  std::size_t pos = magic + 8;
  if (bytes.size() - pos < mlen) throw IoError(name + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(name + ": corrupt manifest (" + e.what() + ")");
  }
  pos += mlen;
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  const std::size_t blob = pos;
  for (const auto& entry : manifest.at("tensors")) {
    CheckpointTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    const auto off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(t.shape);
    if (blob + (off + n) * 8 > bytes.size()) throw IoError(name + ": truncated tensor data for " + t.name);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<double>(detail::get_u64_le(p + blob + (off + i) * 8));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes, path.string());
}

}  // namespace adept
