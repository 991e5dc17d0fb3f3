#pragma once

// Parameter container: 8-byte little-endian header length, a JSON header
// {"format":1,"meta":{...},"tensors":[{"name","shape","offset"}]}, then the raw
// little-endian float64 payload in header order. Offsets are in bytes from the
// start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qds/errors.hpp"
#include "qds/tensor.hpp"

namespace qds {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format"] = 1;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ck.tensors)
      out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!out) throw FormatError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 30)) throw FormatError("checkpoint " + path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("checkpoint " + path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": header is not JSON (" + e.what() + ")");
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  if (!header.contains("tensors") || !header["tensors"].is_array())
    throw FormatError("checkpoint " + path.string() + ": missing field 'tensors'");
  for (const auto& entry : header["tensors"]) {
    if (!entry.contains("name") || !entry.contains("shape") || !entry.contains("offset"))
      throw FormatError("checkpoint " + path.string() + ": tensor entry lacks name/shape/offset");
    const auto name = entry["name"].get<std::string>();
    const auto shape = entry["shape"].get<Shape>();
    const auto offset = entry["offset"].get<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(double) > payload.size())
      throw FormatError("checkpoint " + path.string() + ": payload too short for tensor '" + name + "'");
    std::vector<double> v(n);
    std::memcpy(v.data(), payload.data() + offset, n * sizeof(double));
    ck.tensors.emplace_back(name, Tensor::from(shape, std::move(v)));
  }
  return ck;
}

}  // namespace qds
