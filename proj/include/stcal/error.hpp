#pragma once

#include <stdexcept>
#include <string>

namespace stcal {

// Base class for all recoverable errors raised by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct NotSkewSymmetric : Error {
  using Error::Error;
};
struct EmptyStream : Error {
  using Error::Error;
};
struct NonMonotonicTimestamps : Error {
  using Error::Error;
};
struct DegenerateInterval : Error {
  using Error::Error;
};
struct TimeOffsetOutOfRange : Error {
  using Error::Error;
};
struct InsufficientKeyframes : Error {
  using Error::Error;
};
struct NotConverged : Error {
  using Error::Error;
};
struct RankDeficient : Error {
  using Error::Error;
};
struct GravityDegenerate : Error {
  using Error::Error;
};
struct NeverConverged : Error {
  using Error::Error;
};
struct DimensionMismatch : Error {
  using Error::Error;
};
struct SingularNormalEquations : Error {
  using Error::Error;
};
struct OutOfRange : Error {
  using Error::Error;
};
struct NoVisibleLandmarks : Error {
  using Error::Error;
};
struct AllRunsFailed : Error {
  using Error::Error;
};
struct DegenerateTrajectory : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace stcal
