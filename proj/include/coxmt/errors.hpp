#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace coxmt {

// Base of every error thrown by the library. The CLI maps subclasses to
// process exit codes (see ExitCode in tools/).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside an operation's mathematical domain (log1p(x <= -1), negative
// expression values, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

// A risk set R(t_i) that is empty or references samples out of bounds.
class InvalidRiskSetError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradient or loss during optimization.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, std::size_t step) : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed input file. Row/column are 1-based file coordinates, 0 if unknown.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t row = 0, std::size_t col = 0)
      : Error(row == 0 ? what : what + " at row " + std::to_string(row) + ", column " + std::to_string(col)), row_(row), col_(col) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

// Bad configuration values or unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A metric that is undefined on the given data (no comparable pairs, empty grid).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Violations of the training/evaluation protocol: too few events, empty
// strata, folds that cannot be formed.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace coxmt
