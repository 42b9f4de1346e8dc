#pragma once

#include <stdexcept>
#include <string>

namespace rlaif {

// Malformed or corrupt input file; the message carries the location.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace rlaif
