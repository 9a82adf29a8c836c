#ifndef CFLTR_ERRORS_H_
#define CFLTR_ERRORS_H_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfltr {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on inputs or configuration does not hold.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed text input. Line numbers are 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error("line " + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Optimization diverged (non-finite loss).
class TrainingError : public Error {
 public:
  TrainingError(int epoch, const std::string& message)
      : Error("epoch " + std::to_string(epoch) + ": " + message),
        epoch_(epoch) {}

  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// A model could not be fitted on the supplied data.
class FitError : public Error {
 public:
  using Error::Error;
};

// A key (query, document) is unknown to a lookup table.
class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfltr

#endif  // CFLTR_ERRORS_H_
