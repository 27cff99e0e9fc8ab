#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hiloc {

// Base class for all recoverable failures raised by this library.
// code() is a stable machine-readable identifier; what() is for humans.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

class InvalidArgumentError : public Error {
 public:
  explicit InvalidArgumentError(const std::string& msg)
      : Error("invalid-argument", msg) {}
};

class TimestampError : public Error {
 public:
  explicit TimestampError(const std::string& msg)
      : Error("non-monotonic-timestamps", msg) {}
};

// Step sizes or measurement times outside what the filter supports.
class TimingError : public Error {
 public:
  explicit TimingError(const std::string& msg) : Error("timing-error", msg) {}
};

class MapEmptyError : public Error {
 public:
  explicit MapEmptyError(const std::string& msg) : Error("map-empty", msg) {}
};

// A rendered scan produced zero returns (sensor out of range of any surface).
class EmptyScanError : public Error {
 public:
  explicit EmptyScanError(const std::string& msg) : Error("empty-scan", msg) {}
};

// Malformed file content. offset is the byte position where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, std::uint64_t offset)
      : Error("format-error", msg + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io-error", msg) {}
};

// Too few scan points associate with the map to optimize against it.
class InsufficientOverlapError : public Error {
 public:
  explicit InsufficientOverlapError(const std::string& msg)
      : Error("insufficient-overlap", msg) {}
};

// Every likelihood mode is degenerate for the current scan.
class LocalizationLostError : public Error {
 public:
  LocalizationLostError(const std::string& msg, double stamp)
      : Error("localization-lost", msg), stamp_(stamp) {}
  double stamp() const { return stamp_; }

 private:
  double stamp_;
};

class RegistrationFailedError : public Error {
 public:
  RegistrationFailedError(const std::string& msg, double fitness)
      : Error("registration-failed", msg), fitness_(fitness) {}
  double fitness() const { return fitness_; }

 private:
  double fitness_;
};

class GraphConstructionError : public Error {
 public:
  explicit GraphConstructionError(const std::string& msg)
      : Error("graph-construction", msg) {}
};

// Gauge freedom or disconnected nodes make the normal equations singular.
class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& msg, std::vector<int> nodes)
      : Error("rank-deficiency", msg), nodes_(std::move(nodes)) {}
  const std::vector<int>& unconstrained_nodes() const { return nodes_; }

 private:
  std::vector<int> nodes_;
};

// Regression matrix is numerically rank deficient; lists the features
// that cannot be identified from the given excitation.
class IllConditionedFitError : public Error {
 public:
  IllConditionedFitError(const std::string& msg, std::vector<std::string> features)
      : Error("ill-conditioned-fit", msg), features_(std::move(features)) {}
  const std::vector<std::string>& deficient_features() const { return features_; }

 private:
  std::vector<std::string> features_;
};

// Cross-correlation peak too weak to trust the estimated delay.
class UnreliableDelayError : public Error {
 public:
  UnreliableDelayError(const std::string& msg, double peak)
      : Error("unreliable-delay", msg), peak_(peak) {}
  double peak() const { return peak_; }

 private:
  double peak_;
};

}  // namespace hiloc
