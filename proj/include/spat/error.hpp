#pragma once

#include <stdexcept>
#include <string>

namespace spat {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A transducer/pixel pair whose arrival time falls outside the recording
/// window, or which sits closer than the coincidence guard allows.
class ArrivalOutOfWindow : public Error {
 public:
  ArrivalOutOfWindow(const std::string& what, int pixel, int transducer)
      : Error(what), pixel_(pixel), transducer_(transducer) {}
  int pixel() const { return pixel_; }
  int transducer() const { return transducer_; }

 private:
  int pixel_;
  int transducer_;
};

class MemoryBudgetExceeded : public Error {
 public:
  using Error::Error;
};

class RankDeficient : public Error {
 public:
  using Error::Error;
};

class NotPositiveSemidefinite : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Wraps an error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionMismatch(msg);
}

}  // namespace detail
}  // namespace spat
