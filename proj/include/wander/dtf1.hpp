#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/tensor.hpp"

namespace wander::dtf1 {

// DTF1 record layout (all little-endian):
//   "DTF1" | u32 order N | N x u64 extents | prod(extents) x f64, row-major
inline constexpr std::string_view kMagic = "DTF1";

// Container layout:
//   "DTFC" | u32 version (=1) | u64 manifest length | manifest JSON |
//   one DTF1 record per manifest entry, in manifest order.
// The manifest is {"records": [{"name", "shape"}...], "meta": {...}}.
inline constexpr std::string_view kContainerMagic = "DTFC";
inline constexpr std::uint32_t kContainerVersion = 1;

std::string encode(const DenseTensor& t);

// Decodes one record starting at `offset`; advances `offset` past it.
// Throws FormatError on malformed input.
DenseTensor decode(std::string_view bytes, std::size_t& offset);
DenseTensor decode(std::string_view bytes);

void write_file(const std::filesystem::path& path, const DenseTensor& t);
DenseTensor read_file(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  DenseTensor tensor;
};

struct Container {
  std::vector<NamedTensor> records;
  nlohmann::json meta = nlohmann::json::object();

  const DenseTensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
};

std::string encode_container(const Container& c);
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

std::string read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace wander::dtf1
