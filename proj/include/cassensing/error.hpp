#pragma once

#include <stdexcept>
#include <string>

namespace cas {

// Every failure the library reports derives from Error so callers (and the
// CLI) can catch one type and still tell the categories apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A scalar argument outside its documented range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Array shapes or dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A domain with no valid points, or an empty observation / split.
class EmptyDomainError : public Error {
 public:
  using Error::Error;
};

// Malformed files: manifests, payloads, checkpoints.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during training or sampling.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A frozen model was modified where it must not be.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace cas
