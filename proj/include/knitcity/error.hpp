#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace knitcity {

/// Process exit codes used by the command-line driver.
enum class ExitCode : int {
  kSuccess = 0,
  kConfig = 1,
  kData = 2,
  kTraining = 3,
  kPartialGrid = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kData; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Zero variance inside a normalization window.
class DegenerateDataError : public DataError {
 public:
  DegenerateDataError(const std::string& what, std::size_t window_index)
      : DataError(what + " (window " + std::to_string(window_index) + ")"),
        window_index_(window_index) {}
  std::size_t window_index() const noexcept { return window_index_; }

 private:
  std::size_t window_index_;
};

class RebalanceError : public DataError {
 public:
  explicit RebalanceError(int missing_class)
      : DataError("cannot rebalance: class " + std::to_string(missing_class) +
                  " has no samples"),
        missing_class_(missing_class) {}
  int missing_class() const noexcept { return missing_class_; }

 private:
  int missing_class_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kTraining; }

 private:
  std::size_t epoch_;
};

/// Misuse of the environment's stepping protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace knitcity
