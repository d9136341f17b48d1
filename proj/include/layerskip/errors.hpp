#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace layerskip {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced or consumed by a numeric op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ContextOverflow : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  CheckpointError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class UnsupportedVersion : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace layerskip
