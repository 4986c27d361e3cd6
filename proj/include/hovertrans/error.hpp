#pragma once

#include <stdexcept>
#include <string>

namespace hovertrans {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters or geometry (divisibility, alignment, head counts).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data that violates a documented contract (labels, ids, thresholds).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not match what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Files that are missing, unreadable or fail to decode.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// A metric whose definition requires data that is absent (e.g. AUC with one class).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hovertrans
