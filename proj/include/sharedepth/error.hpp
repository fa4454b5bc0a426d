#pragma once

#include <stdexcept>
#include <string>

namespace sharedepth {

enum class ErrorKind {
  structural,
  numeric,
  domain,
  training,
  config,
  ingestion,
  missing_artifact,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::structural: return "structural";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::domain: return "domain";
    case ErrorKind::training: return "training";
    case ErrorKind::config: return "config";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::missing_artifact: return "missing-artifact";
  }
  return "unknown";
}

// Process exit code used by the CLI for each error category.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::missing_artifact: return 3;
    case ErrorKind::ingestion: return 4;
    case ErrorKind::training: return 5;
    case ErrorKind::structural: return 6;
    case ErrorKind::domain: return 7;
    case ErrorKind::numeric: return 8;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct StructuralError : Error {
  explicit StructuralError(const std::string& what) : Error(ErrorKind::structural, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error(ErrorKind::domain, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct IngestionError : Error {
  IngestionError(const std::string& what, std::size_t line)
      : Error(ErrorKind::ingestion, "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& what)
      : Error(ErrorKind::missing_artifact, what) {}
};

/// Raised when the training objective becomes non-finite.
struct TrainingError : Error {
  TrainingError(const std::string& what, int epoch)
      : Error(ErrorKind::training, what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace sharedepth
