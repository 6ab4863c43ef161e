#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedpkd {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input or parameter shape does not match the layer it is fed to.
class DimensionError : public Error {
 public:
  DimensionError(std::size_t layer, const std::string& what)
      : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

// Raised when a gradient or model contains NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

// Malformed binary input. `offset` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t offset, const std::string& what)
      : Error(path + " @ byte " + std::to_string(offset) + ": " + what),
        path_(std::move(path)),
        offset_(offset) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string path_;
  std::size_t offset_;
};

}  // namespace fedpkd
