#include "wander/dtf1.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "wander/errors.hpp"

namespace wander::dtf1 {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& offset, const char* what) {
  if (bytes.size() < offset || bytes.size() - offset < sizeof(T)) {
    throw FormatError(std::string("truncated input while reading ") + what, offset);
  }
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, bytes.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  offset += sizeof(T);
  return value;
}

void expect_magic(std::string_view bytes, std::size_t& offset, std::string_view magic) {
  if (bytes.size() < offset || bytes.size() - offset < magic.size()) {
    throw FormatError("truncated input while reading magic", offset);
  }
  if (bytes.substr(offset, magic.size()) != magic) {
    throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", offset);
  }
  offset += magic.size();
}

}  // namespace

std::string encode(const DenseTensor& t) {
  std::string out;
  out.reserve(4 + 4 + 8 * t.order() + 8 * t.size());
  out.append(kMagic);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.order()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  for (double v : t.data()) put_le<double>(out, v);
  return out;
}

DenseTensor decode(std::string_view bytes, std::size_t& offset) {
  const std::size_t start = offset;
  expect_magic(bytes, offset, kMagic);
  const auto order = get_le<std::uint32_t>(bytes, offset, "order");
  if (order == 0) throw FormatError("tensor order must be >= 1", offset - 4);
  Shape shape;
  shape.reserve(order);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < order; ++i) {
    const std::size_t at = offset;
    const auto e = get_le<std::uint64_t>(bytes, offset, "extent");
    if (e == 0) throw FormatError("zero extent", at);
    if (count > std::numeric_limits<std::size_t>::max() / 8 / e) {
      throw FormatError("extents overflow", at);
    }
    count *= e;
    shape.push_back(static_cast<std::size_t>(e));
  }
  if (bytes.size() - offset < count * 8) {
    throw FormatError("truncated payload: need " + std::to_string(count * 8) + " bytes, have " +
                          std::to_string(bytes.size() - offset) + " (record starts at " +
                          std::to_string(start) + ")",
                      offset);
  }
  std::vector<double> data(count);
  for (auto& v : data) v = get_le<double>(bytes, offset, "value");
  return DenseTensor(std::move(shape), std::move(data));
}

DenseTensor decode(std::string_view bytes) {
  std::size_t offset = 0;
  auto t = decode(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after DTF1 record", offset);
  return t;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("write failed for " + path.string());
}

void write_file(const std::filesystem::path& path, const DenseTensor& t) {
  write_bytes(path, encode(t));
}

DenseTensor read_file(const std::filesystem::path& path) { return decode(read_bytes(path)); }

const DenseTensor& Container::get(std::string_view name) const {
  for (const auto& r : records)
    if (r.name == name) return r.tensor;
  throw InvalidArgument("container has no record named \"" + std::string(name) + "\"");
}

bool Container::contains(std::string_view name) const {
  for (const auto& r : records)
    if (r.name == name) return true;
  return false;
}

std::string encode_container(const Container& c) {
  nlohmann::json manifest;
  manifest["records"] = nlohmann::json::array();
  for (const auto& r : c.records) {
    manifest["records"].push_back({{"name", r.name}, {"shape", r.tensor.shape()}});
  }
  manifest["meta"] = c.meta;
  const std::string text = manifest.dump();

  std::string out(kContainerMagic);
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& r : c.records) out += encode(r.tensor);
  return out;
}

Container decode_container(std::string_view bytes) {
  std::size_t offset = 0;
  expect_magic(bytes, offset, kContainerMagic);
  const std::size_t version_at = offset;
  const auto version = get_le<std::uint32_t>(bytes, offset, "container version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), version_at);
  }
  const auto length = get_le<std::uint64_t>(bytes, offset, "manifest length");
  if (bytes.size() - offset < length) throw FormatError("truncated manifest", offset);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(offset, length));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), offset);
  }
  const std::size_t manifest_at = offset;
  offset += length;
  if (!manifest.is_object() || !manifest.contains("records") || !manifest["records"].is_array()) {
    throw FormatError("manifest lacks a records array", manifest_at);
  }

  Container c;
  if (manifest.contains("meta")) c.meta = manifest["meta"];
  for (const auto& entry : manifest["records"]) {
    const std::size_t record_at = offset;
    std::string name;
    Shape shape;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad manifest entry: ") + e.what(), manifest_at);
    }
    DenseTensor t = decode(bytes, offset);
    if (t.shape() != shape) {
      throw FormatError("record \"" + name + "\" shape disagrees with manifest", record_at);
    }
    c.records.push_back({std::move(name), std::move(t)});
  }
  if (offset != bytes.size()) throw FormatError("trailing bytes after last record", offset);
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_bytes(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  return decode_container(read_bytes(path));
}

}  // namespace wander::dtf1
