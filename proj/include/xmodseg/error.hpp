#pragma once

#include <stdexcept>
#include <string>

namespace xmodseg {

/// Base class for all errors raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or type invariant.
struct ValidationError : Error {
  using Error::Error;
};

/// Filesystem-level failure (unwritable path, missing file).
struct IoError : Error {
  using Error::Error;
};

/// File exists but its contents are not in the expected format.
struct FormatError : Error {
  using Error::Error;
};

/// Bad run configuration (missing checkpoint, incompatible versions).
struct ConfigError : Error {
  using Error::Error;
};

/// Training was aborted (e.g. NaN loss); a salvage checkpoint was written.
struct TrainAbort : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace xmodseg
