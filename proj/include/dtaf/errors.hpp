#pragma once

#include <stdexcept>
#include <string>

namespace dtaf {

// Base for every error the library raises. The CLI maps UserError to exit
// code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class IngestionError : public UserError {
 public:
  using UserError::UserError;
};

class WindowingError : public UserError {
 public:
  using UserError::UserError;
};

// Misuse of an API contract, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dtaf
