#pragma once

#include <stdexcept>
#include <string>

namespace m4fuse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class ParamError : public Error {
 public:
  explicit ParamError(const std::string& what) : Error("parameter error: " + what) {}
};

class RoutingError : public Error {
 public:
  explicit RoutingError(const std::string& what) : Error("routing error: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("training error: " + what) {}
};

class MetricError : public Error {
 public:
  explicit MetricError(const std::string& what) : Error("metric error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

}  // namespace m4fuse
