#pragma once

// Checkpoint container.
//
//   bytes 0-3   magic "WSCK"
//   u32         container version (1)
//   u32 + bytes metadata record, UTF-8 JSON
//   u32         tensor count
//   per tensor: u32 name length, name bytes, u32 rank, rank × u32 dims,
//               prod(dims) × float32 values (row-major)
//
// All integers and floats are little-endian. The metadata record carries the
// model config ("model"), the default taps, the preprocessing constants and
// a format version; callers may add their own keys.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wsss/backbone.hpp"
#include "wsss/dataset.hpp"

namespace wsss {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require<IoError>(in.gcount() == 4, "truncated ", what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(std::istream& in, const std::string& what) { return std::bit_cast<float>(get_u32(in, what)); }

}  // namespace detail

inline void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  write_atomically(path, [&](std::ofstream& out) {
    out.write("WSCK", 4);
    detail::put_u32(out, kCheckpointVersion);
    const std::string meta = ck.metadata.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
      for (float v : t.storage()) detail::put_f32(out, v);
    }
  });
}

inline Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "checkpoint not found: ", path.string());
  char magic[4] = {};
  in.read(magic, 4);
  require<IoError>(in.gcount() == 4 && std::memcmp(magic, "WSCK", 4) == 0, path.string(), ": not a checkpoint");
  const auto version = detail::get_u32(in, "checkpoint version");
  require<IoError>(version == kCheckpointVersion, path.string(), ": unsupported checkpoint version ", version);
  Checkpoint ck;
  const auto meta_len = detail::get_u32(in, "metadata length");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  require<IoError>(in.gcount() == static_cast<std::streamsize>(meta_len), path.string(), ": truncated metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    fail<IoError>(path.string(), ": metadata is not valid JSON (", e.what(), ")");
  }
  const auto count = detail::get_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_u32(in, "tensor name");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = detail::get_u32(in, "tensor rank");
    require<IoError>(rank <= 8, path.string(), ": implausible tensor rank ", rank);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(detail::get_u32(in, "tensor dims")));
    Tensor<float> t(shape);
    for (auto& v : t.storage()) v = detail::get_f32(in, "tensor data");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

template <typename T>
Checkpoint make_checkpoint(const ClassifierModel<T>& model, const Normalization& norm,
                           nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ck;
  ck.metadata = std::move(extra);
  ck.metadata["format_version"] = kCheckpointVersion;
  ck.metadata["model"] = model.config();
  ck.metadata["arch"] = to_string(model.arch());
  ck.metadata["taps"] = model.config().taps;
  ck.metadata["preprocessing"] = {{"mean", norm.mean}, {"std", norm.std}};
  for (const auto& p : model.parameters()) ck.tensors.emplace_back(p.name, p.var.value().template cast<float>());
  return ck;
}

template <typename T = float>
std::unique_ptr<ClassifierModel<T>> model_from_checkpoint(const Checkpoint& ck) {
  require<ValidationError>(ck.metadata.contains("model"), "checkpoint metadata lacks a model record");
  auto model = make_model<T>(ck.metadata.at("model").get<ModelConfig>(), 0);
  for (auto& p : model->parameters()) {
    const auto* t = ck.find(p.name);
    require<ValidationError>(t != nullptr, "checkpoint lacks parameter ", p.name);
    require<ShapeError>(t->same_shape(Tensor<float>(p.var.shape())), "checkpoint parameter ", p.name, " has shape ",
                        shape_str(t->shape()), ", model expects ", shape_str(p.var.shape()));
    p.var.mutable_value() = t->template cast<T>();
  }
  return model;
}

inline Normalization normalization_from_checkpoint(const Checkpoint& ck) {
  Normalization n;
  if (ck.metadata.contains("preprocessing")) {
    const auto& p = ck.metadata.at("preprocessing");
    n.mean = p.at("mean").get<std::array<float, 3>>();
    n.std = p.at("std").get<std::array<float, 3>>();
  }
  return n;
}

}  // namespace wsss
