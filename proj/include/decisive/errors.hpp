#pragma once

#include <stdexcept>
#include <string>

namespace decisive {

/// Bad user input: malformed files, shape mismatches, invalid configs.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value escaped a numeric routine.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The simulator could not place the requested instances.
class SceneInfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace decisive
