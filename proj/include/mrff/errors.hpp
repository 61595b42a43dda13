#pragma once

#include <stdexcept>
#include <string>

namespace mrff {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (caller bug).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input is well-formed but carries no usable signal (empty sequence, all-zero mask).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long long round, long long client)
      : Error(what), round_(round), client_(client) {}
  long long round() const { return round_; }
  long long client() const { return client_; }

 private:
  long long round_;
  long long client_;
};

}  // namespace mrff
