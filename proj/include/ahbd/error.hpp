#pragma once

#include <stdexcept>
#include <string>

namespace ahbd {

// Base for every error raised by the library. Subclasses name the violated
// contract so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

// Numerically undefined result: a softmax row with no allowed position, an
// all-zero attention block passed to cosine similarity, a model whose heads
// have no gradient sensitivity at all, an empty safe-head reference.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace ahbd
