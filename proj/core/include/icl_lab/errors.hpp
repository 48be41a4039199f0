#pragma once

#include <stdexcept>
#include <string>

namespace icl {

/// Base of every error raised by the library. The CLI maps SpecError
/// subclasses to exit code 2 and NumericalFailure to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied something that violates a documented precondition.
class SpecError : public Error {
 public:
  using Error::Error;
};

class NumericalFailure : public Error {
 public:
  using Error::Error;
};

// linalg / metrics
class DegenerateCloud : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class NotSymmetric : public SpecError {
 public:
  using SpecError::SpecError;
};

class NonFinite : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

// model container
class FormatError : public SpecError {
 public:
  using SpecError::SpecError;
};

class MagicMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedPayload : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedDump : public TruncatedPayload {
 public:
  using TruncatedPayload::TruncatedPayload;
};

class InvalidIntervention : public SpecError {
 public:
  using SpecError::SpecError;
};

class SequenceTooLong : public SpecError {
 public:
  using SpecError::SpecError;
};

// tasks
class TokenizationError : public SpecError {
 public:
  using SpecError::SpecError;
};

class InsufficientPool : public SpecError {
 public:
  using SpecError::SpecError;
};

}  // namespace icl
