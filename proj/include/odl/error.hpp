#pragma once

#include <stdexcept>
#include <string>

namespace odl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file (corpus, vocabulary, checkpoint, config).
class ParseError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, or a probability outside its domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A triple presentation outside the ordered/misordered families.
class PatternError : public Error {
 public:
  using Error::Error;
};

}  // namespace odl
