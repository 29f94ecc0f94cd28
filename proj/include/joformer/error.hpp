#pragma once

#include <stdexcept>

namespace joformer {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };     // dimension mismatch
struct ConfigError : Error { using Error::Error; };    // invalid configuration value
struct IndexError : Error { using Error::Error; };     // id or index out of range
struct DataError : Error { using Error::Error; };      // corpus / vocabulary problem
struct IoError : Error { using Error::Error; };        // file or network failure
struct ParseError : Error { using Error::Error; };     // malformed file contents
struct ContractError : Error { using Error::Error; };  // API misuse

}  // namespace joformer
