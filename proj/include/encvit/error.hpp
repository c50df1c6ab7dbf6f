#pragma once

#include <stdexcept>
#include <string>

namespace encvit {

/// Base class for every error raised by the library. Messages are prefixed
/// with the module that raised them, e.g. "perm: invalid permutation".
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument violated an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A file or byte buffer could not be decoded.
class ParseError : public Error {
 public:
  using Error::Error;
};

namespace detail {

[[noreturn]] inline void reject(const char* module, const std::string& what) {
  throw InvalidInput(std::string(module) + ": " + what);
}

inline void require(bool ok, const char* module, const std::string& what) {
  if (!ok) reject(module, what);
}

}  // namespace detail
}  // namespace encvit
