#pragma once

#include <stdexcept>
#include <string>

namespace hypersort {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto exit codes (see include/hypersort/cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data is well-formed on disk but semantically invalid
// (non-binary mask, out-of-range class id, missing sample, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// A file does not follow its binary/text format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// The filesystem refused an operation.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite values appeared during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hypersort
