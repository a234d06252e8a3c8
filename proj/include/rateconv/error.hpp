#pragma once

#include <stdexcept>
#include <string>

namespace rateconv {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter or configuration value is outside its declared range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data (tensors, files, statistics) is inconsistent or malformed.
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// A file could not be decoded. Carries the offending path and, where it
/// applies, the layer index (-1 otherwise).
class FormatError : public DataError {
 public:
  FormatError(std::string path, std::string what, int layer = -1)
      : DataError(compose(path, what, layer)),
        path_(std::move(path)),
        reason_(std::move(what)),
        layer_(layer) {}

  const std::string& path() const noexcept { return path_; }
  int layer() const noexcept { return layer_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  static std::string compose(const std::string& path, const std::string& what,
                             int layer) {
    std::string msg = path + ": ";
    if (layer >= 0) msg += "layer " + std::to_string(layer) + ": ";
    return msg + what;
  }

  std::string path_;
  std::string reason_;
  int layer_;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace rateconv
