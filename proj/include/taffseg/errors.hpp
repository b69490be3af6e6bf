#pragma once

#include <stdexcept>
#include <string>

namespace taff {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when a loss component turns non-finite mid-training.
class TrainingAbort : public Error {
 public:
  TrainingAbort(const std::string& component, const std::string& what)
      : Error(what), component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

}  // namespace taff
