#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace hijackfl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument violates an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file could not be read, or its contents are malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// An experiment configuration is malformed. `line` is 0 when the problem is
/// not tied to one line of the file.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::size_t line = 0, std::string field = {})
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line(line), field(std::move(field)) {}
  std::size_t line;
  std::string field;
};

/// Anchor search exhausted its restart budget.
class AnchorSearchFailed : public Error {
 public:
  AnchorSearchFailed(std::size_t cls, const std::string& what)
      : Error(what), target_class(cls) {}
  std::size_t target_class;
};

}  // namespace hijackfl
