#pragma once

#include <stdexcept>
#include <string>

namespace seldde {

/// Base of every exception thrown by the library. `user_facing()` separates
/// bad input (exit code 1 in the CLI) from internal failures (exit code 2).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, bool user_facing = true)
      : std::runtime_error(what), user_facing_(user_facing) {}
  bool user_facing() const noexcept { return user_facing_; }

 private:
  bool user_facing_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, false) {}
};

}  // namespace seldde

namespace seldde {

class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace seldde
