#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace umic {

/// Base class for every error raised by the library. Each subclass maps to a
/// distinct CLI exit code (see tools/umic.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or configuration values.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Sample values outside the representable range.
class RangeError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

/// Geometry that cannot be simulated or solved (node behind a station,
/// parallel rays).
class GeometryError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometryError : public GeometryError {
 public:
  DegenerateGeometryError(const std::string& what, double condition)
      : GeometryError(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

/// Optical pulse stream that does not match the sweep cycle.
class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::optional<std::size_t> slot = std::nullopt)
      : Error(what), slot_(slot) {}
  std::optional<std::size_t> slot() const noexcept { return slot_; }

 private:
  std::optional<std::size_t> slot_;
};

/// Pulse counts inconsistent with the cycle, or a malformed wire frame.
class FramingError : public Error {
 public:
  using Error::Error;
};

/// Wire frame whose CRC does not verify.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Correlation peak too weak: the traces do not share a beacon or the window
/// is too short.
class NoSyncLockError : public Error {
 public:
  NoSyncLockError(const std::string& what, double peak_corr,
                  std::optional<std::size_t> window = std::nullopt)
      : Error(what), peak_corr_(peak_corr), window_(window) {}
  double peak_corr() const noexcept { return peak_corr_; }
  std::optional<std::size_t> window() const noexcept { return window_; }

 private:
  double peak_corr_;
  std::optional<std::size_t> window_;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver that diverged; `trace` holds the step norm of every
/// iteration.
class ConvergenceError : public Error {
 public:
  using Error::Error;
  ConvergenceError(const std::string& what, std::vector<double> trace) : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

/// Config or input document that fails validation; `path` is a JSON pointer.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& path, const std::string& message)
      : Error(path + ": " + message), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// A pipeline stage was run before the stage whose outputs it consumes.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& stage, const std::string& what)
      : Error(what), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace umic
