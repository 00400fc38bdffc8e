#pragma once

#include <stdexcept>
#include <string>

namespace slip {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A real value exceeds the codec's value bound, or a field value leaves the
/// no-wrap budget.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A state machine received a message it cannot accept in its current phase.
class PhaseError : public Error {
 public:
  using Error::Error;
};

class MaskReuseError : public Error {
 public:
  using Error::Error;
};

/// Transport or handshake failure. Never used for integrity rejection.
class SessionError : public Error {
 public:
  using Error::Error;
};

class FrameError : public Error {
 public:
  using Error::Error;
};

/// Linear system does not determine a unique solution yet.
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

}  // namespace slip
