#pragma once

#include <stdexcept>
#include <string>

namespace fedcrfd {

// Exit-code families shared by the library and the CLI.
enum class ErrorCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kIo = 3,
  kMissingInput = 4,
  kNumeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCode::kInternal, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class MissingInputError : public Error {
 public:
  explicit MissingInputError(const std::string& what) : Error(ErrorCode::kMissingInput, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCode::kNumeric, what) {}
};

/// Violations of the federation message protocol (barrier misuse, key order, missing party).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error(ErrorCode::kInternal, what) {}
};

}  // namespace fedcrfd
