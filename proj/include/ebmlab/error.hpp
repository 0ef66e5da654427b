#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ebmlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape mismatch, non-scalar
// output handed to a gradient request, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Second-order request on a trace built for first order only.
class UnsupportedOrderError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::ptrdiff_t coordinate = -1)
      : Error(what), coordinate_(coordinate) {}
  std::ptrdiff_t coordinate() const { return coordinate_; }

 private:
  std::ptrdiff_t coordinate_;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ebmlab
