#pragma once

#include <stdexcept>
#include <string>

namespace otfuse {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numeric argument violates its documented domain (simplex, positivity,
/// finiteness).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver failed to produce a usable result.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace otfuse
