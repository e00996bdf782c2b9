#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace durablefs {

// Base for all recoverable engine errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

// Image too small / bad mkfs parameters.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Bad superblock, undecodable log entry, failed commit read-back.
class CorruptError : public Error {
 public:
  using Error::Error;
};

class NoSpaceError : public Error {
 public:
  using Error::Error;
};

// Second writer on an inode, or unlink of a file with an active writer.
class BusyError : public Error {
 public:
  using Error::Error;
};

// Caller bug: double free, double close, bad handle, value out of log
// field width.
class LogicError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ExistsError : public Error {
 public:
  using Error::Error;
};

class NotEmptyError : public Error {
 public:
  using Error::Error;
};

class TypeError : public Error {
 public:
  using Error::Error;
};

// Log full even after trim; caller must wait for commits.
class LogFullError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Thrown by PmDevice when a crash trap fires. Deliberately NOT derived from
// Error: harness code catches it explicitly, and nothing else should.
struct CrashInjected {
  uint64_t op_index;
};

}  // namespace durablefs
