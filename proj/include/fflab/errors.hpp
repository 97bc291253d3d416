#pragma once

#include <stdexcept>
#include <string>

namespace fflab {

// Bad caller input: out-of-range tokens, unpaired traces, missing files.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Mathematical precondition violated (NaN probability, empty softmax).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed checkpoint or data file. The message names the offending field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or construction request (bad dims, vocab overflow).
class ConstructionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fflab
