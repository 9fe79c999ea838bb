#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace quadra {

/// Base for every error raised by the library. `component()` names the module
/// that failed so CLI messages can point at it.
class Error : public std::runtime_error {
 public:
  Error(std::string component, const std::string& what)
      : std::runtime_error(component + ": " + what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

/// Tensor shapes do not fit the operation.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("tensor-core", what) {}
};

/// Caller-supplied argument outside its domain (bad label, bad index, ...).
class InputError : public Error {
 public:
  InputError(std::string component, const std::string& what) : Error(std::move(component), what) {}
};

/// NaN/Inf encountered.
class NumericError : public Error {
 public:
  NumericError(std::string component, const std::string& what) : Error(std::move(component), what) {}
};

/// Layer/model configuration is not buildable.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error("autobuild", "line " + std::to_string(line) + ": " + what), line_(line) {}

  int line() const noexcept { return line_; }

 private:
  int line_;
};

/// Cache, checkpoint or manifest does not match what produced it.
class IntegrityError : public Error {
 public:
  IntegrityError(std::string component, const std::string& what)
      : Error(std::move(component), what) {}
};

/// Malformed dataset file. `offset()` is the byte offset of the first bad byte.
class IngestionError : public Error {
 public:
  IngestionError(std::string file, std::uint64_t offset, const std::string& what)
      : Error("cli", file + " @ offset " + std::to_string(offset) + ": " + what),
        file_(std::move(file)),
        offset_(offset) {}

  const std::string& file() const noexcept { return file_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error("io", path + ": " + what), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace quadra
