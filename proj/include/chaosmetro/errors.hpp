#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace chaosmetro {

/// A computation produced a result that violates a numerical invariant
/// (non-unitary propagator, negative QFI, failed eigensolver, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad command line or configuration input. Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public UsageError {
 public:
  ValidationError(std::string field, const std::string& what)
      : UsageError("invalid value for '" + field + "': " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace chaosmetro
