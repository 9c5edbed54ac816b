#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace dcr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched latent shapes between branches or updates.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value violates a documented invariant (range, finiteness, normalization).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Missing or inconsistent configuration (extractors, endpoints, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A remote completion or document did not have the required shape.
class FormatError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

// A sampling trajectory was aborted at a specific denoising step.
class TrajectoryError : public Error {
 public:
  TrajectoryError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

// The judge answered but no verdict could be extracted. Carries the raw text.
class VerdictError : public Error {
 public:
  VerdictError(const std::string& what, std::string raw_response)
      : Error(what), raw_response_(std::move(raw_response)) {}
  const std::string& raw_response() const noexcept { return raw_response_; }

 private:
  std::string raw_response_;
};

// The judge trailer was present but the score was non-integer or out of range.
class JudgeParseError : public VerdictError {
 public:
  using VerdictError::VerdictError;
};

}  // namespace dcr
