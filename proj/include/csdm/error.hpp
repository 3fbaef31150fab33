#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace csdm {

// Base for everything thrown by the library. The CLI maps subclasses onto
// exit codes (config 2, numerical 3, io 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition / shape violation on caller-supplied arguments.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// NaN/Inf, divergence or non-convergence. `step` is the iteration at which it
// happened and `last_estimate` the last finite value produced, when meaningful.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::size_t step = 0, double last_estimate = 0.0)
      : Error(what), step_(step), last_estimate_(last_estimate) {}
  std::size_t step() const noexcept { return step_; }
  double last_estimate() const noexcept { return last_estimate_; }

 private:
  std::size_t step_;
  double last_estimate_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace csdm
