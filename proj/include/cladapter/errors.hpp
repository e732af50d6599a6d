// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cladapter {

/// Inconsistent dimensions between operands or against a recorded layout.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value where a finite one is required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Invalid argument that is not a shape problem (labels, empty datasets, plans).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed checkpoint or data file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint header dimensions disagree with the stored arrays.
class DimensionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration value; the message names the offending field.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace cladapter
