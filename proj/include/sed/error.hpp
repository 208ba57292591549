#pragma once

#include <stdexcept>
#include <string>

namespace sed {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: config files, manifests, CLI arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sed
