#pragma once

#include <stdexcept>
#include <string>

namespace gaitstr {

// Base of every error raised by the library. CLI maps `is_usage_error()` to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool is_usage_error() const { return false; }
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class DegeneratePose : public Error {
 public:
  using Error::Error;
};

class InsufficientFrames : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class InvalidBatch : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  bool is_usage_error() const override { return true; }
};

}  // namespace gaitstr
