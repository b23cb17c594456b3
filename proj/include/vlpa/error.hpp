#pragma once

#include <stdexcept>
#include <string>

namespace vlpa {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kNumeric = 3,
  kTraining = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kConfig; }
};

// Bad configuration: shape mismatches, unknown keys, invalid parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Non-finite values appeared where finite ones were required.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

// Pretraining finished its budget without reaching the target metrics.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::string metrics_json)
      : Error(what), metrics_json_(std::move(metrics_json)) {}
  ExitCode exit_code() const noexcept override { return ExitCode::kTraining; }
  const std::string& metrics_json() const noexcept { return metrics_json_; }

 private:
  std::string metrics_json_;
};

}  // namespace vlpa
