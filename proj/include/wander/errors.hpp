#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace wander {

// Shape or argument contract violated by the caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Adapter configuration is internally inconsistent (e.g. residual policy
// incompatible with the fused shape).
class InvalidConfiguration : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An explicit (oracle) path would materialize more entries than allowed.
class ResourceLimit : public std::runtime_error {
 public:
  ResourceLimit(const std::string& what, std::uint64_t requested,
                std::uint64_t ceiling)
      : std::runtime_error(what + " (requested " + std::to_string(requested) +
                           " entries, ceiling " + std::to_string(ceiling) + ")"),
        requested_(requested),
        ceiling_(ceiling) {}

  std::uint64_t requested() const { return requested_; }
  std::uint64_t ceiling() const { return ceiling_; }

 private:
  std::uint64_t requested_;
  std::uint64_t ceiling_;
};

// Malformed on-disk data. offset() is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Training produced a non-finite loss. report() is the partial training
// report serialized as JSON.
class Divergence : public std::runtime_error {
 public:
  Divergence(const std::string& what, std::string report)
      : std::runtime_error(what), report_(std::move(report)) {}

  const std::string& report() const { return report_; }

 private:
  std::string report_;
};

}  // namespace wander
