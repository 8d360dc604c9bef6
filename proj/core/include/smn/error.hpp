#pragma once

#include <stdexcept>
#include <string>

namespace smn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents disagree between operands. The message names the offending dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on argument values was violated (degenerate box, unnormalized scores, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingArtifact : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient, or a gradient check that exceeded tolerance.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace smn
