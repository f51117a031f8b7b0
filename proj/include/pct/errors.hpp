#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pct {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidDepthError : public Error {
 public:
  using Error::Error;
};

class BehindCameraError : public Error {
 public:
  using Error::Error;
};

class DegenerateRoiError : public Error {
 public:
  using Error::Error;
};

class DegenerateBoxError : public Error {
 public:
  using Error::Error;
};

class EmptyPatchError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch inside the compute engine; the message names the layer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Calling an operation out of order (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Malformed binary input (bad magic, truncated payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

class SceneGenerationError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace pct
