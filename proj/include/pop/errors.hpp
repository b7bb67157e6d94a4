#pragma once

#include <stdexcept>
#include <string>

namespace pop {

// Base of every error thrown by the library. The CLI maps ConfigError and
// usage problems to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class FileError : public Error {
 public:
  using Error::Error;
};

// Raised when an operation produces a non-finite value from finite inputs.
class OverflowError : public Error {
 public:
  using Error::Error;
};

}  // namespace pop
