#pragma once

#include <stdexcept>
#include <string>

namespace flmgrow {

// Failure families. The CLI maps each family onto its own exit code.
enum class ErrorKind {
  kValidation,  // bad config, plan, shapes, or caller contract
  kNumerical,   // non-finite values, failed preservation checks
  kIo,          // filesystem and parse failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::kValidation, "dimension error: " + w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kValidation, "config error: " + w) {}
};

struct PlanError : Error {
  explicit PlanError(const std::string& w) : Error(ErrorKind::kValidation, "plan error: " + w) {}
};

struct InputError : Error {
  explicit InputError(const std::string& w) : Error(ErrorKind::kValidation, "input error: " + w) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorKind::kValidation, "contract error: " + w) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::kNumerical, "numerical error: " + w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, "i/o error: " + w) {}
};

}  // namespace flmgrow
