#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace scal {

enum class Errc {
  kInvalidArgument,
  kAllZeroMass,
  kTemplateError,
  kDuplicateFirstToken,
  kEmptyToken,
  kZeroEvidence,
  kEmptyContext,
  kShapeMismatch,
  kEmptyTrainingSet,
  kLabelSpaceMismatch,
  kEmptyBatch,
  kInsufficientSupport,
  kUnknownMethod,
  kPoolTooSmall,
  kMissingEmbeddings,
  kDimMismatch,
  kBackendError,
  kMissingLabelToken,
  kCacheMiss,
  kIoError,
  kParseError,
  kLengthMismatch,
  kDegenerateInput,
  kConfigError,
  kMismatchedIds,
};

std::string_view errc_name(Errc code) noexcept;

/// Base exception for every failure raised by the library. The code is the
/// stable, testable part; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

  /// Backend-side failures map to CLI exit code 2, everything else to 1.
  bool is_backend_failure() const noexcept {
    return code_ == Errc::kBackendError || code_ == Errc::kMissingLabelToken ||
           code_ == Errc::kCacheMiss;
  }

 private:
  Errc code_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error(Errc::kParseError, "line " + std::to_string(line) + ": " + message), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class BackendError : public Error {
 public:
  BackendError(int status, const std::string& body_excerpt)
      : Error(Errc::kBackendError, "status " + std::to_string(status) + ": " + body_excerpt),
        status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

}  // namespace scal
