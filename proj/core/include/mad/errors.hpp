#pragma once

#include <stdexcept>
#include <string>

namespace mad {

/// Coarse error category; the CLI maps each kind onto a stable exit code.
enum class ErrorKind {
  kConfig,
  kData,
  kNumeric,
  kIo,
  kNotImplemented,
  kGeneration,
  kSampling,
  kUndefinedMetric,
  kIntegrity,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};

struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::kData, w) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};

// I/O refinements. Callers that only care about "could not read it" catch IoError.
struct VersionError : IoError {
  explicit VersionError(const std::string& w) : IoError(w) {}
};
struct CorruptFileError : IoError {
  explicit CorruptFileError(const std::string& w) : IoError(w) {}
};
struct SchemaError : IoError {
  explicit SchemaError(const std::string& w) : IoError(w) {}
};
struct ChecksumError : IoError {
  explicit ChecksumError(const std::string& w) : IoError(w) {}
};

struct NotImplementedError : Error {
  explicit NotImplementedError(const std::string& w) : Error(ErrorKind::kNotImplemented, w) {}
};

struct GenerationError : Error {
  explicit GenerationError(const std::string& w) : Error(ErrorKind::kGeneration, w) {}
};

struct SamplingError : Error {
  explicit SamplingError(const std::string& w) : Error(ErrorKind::kSampling, w) {}
};

struct UndefinedMetricError : Error {
  explicit UndefinedMetricError(const std::string& w) : Error(ErrorKind::kUndefinedMetric, w) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error(ErrorKind::kUndefinedMetric, w) {}
};

struct IntegrityError : Error {
  explicit IntegrityError(const std::string& w) : Error(ErrorKind::kIntegrity, w) {}
};

}  // namespace mad
