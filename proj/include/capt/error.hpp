#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace capt {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

/// A scalar argument is outside its valid range (τ ≤ 0, k > n, ...).
class ParameterError : public Error {
  public:
    using Error::Error;
};

/// A structural setting is inconsistent (head count, kernel size, world spec).
class ConfigError : public Error {
  public:
    using Error::Error;
};

class DegenerateInputError : public Error {
  public:
    using Error::Error;
};

class InputError : public Error {
  public:
    using Error::Error;
};

/// Caller broke a documented precondition of a call sequence.
class ContractError : public Error {
  public:
    using Error::Error;
};

class UsageError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

/// Malformed or truncated binary file. Carries the byte offset of the failure.
class FormatError : public Error {
  public:
    FormatError(const std::string &what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    [[nodiscard]] std::uint64_t offset() const noexcept { return offset_; }

  private:
    std::uint64_t offset_;
};

}  // namespace capt
