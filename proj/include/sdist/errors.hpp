#pragma once

#include <stdexcept>
#include <string>

namespace sdist {

/// Base class for every error raised by the library. `kind()` is the short
/// machine-readable tag printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

}  // namespace sdist
