#pragma once

#include <stdexcept>
#include <string>

namespace lfcbm {

// Base exception for every recoverable failure the engine reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lookup of an id or index that does not exist.
class NotFound : public Error {
 public:
  using Error::Error;
};

// Request is valid but conflicts with current state (e.g. reverting twice).
class Conflict : public Error {
 public:
  using Error::Error;
};

}  // namespace lfcbm
