#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kvlab {

enum class ErrorCode {
  kInvalidDimension,
  kInvalidConfig,
  kDimensionMismatch,
  kSingularMatrix,
  kUnsupportedArchitecture,
  kCacheInconsistency,
  kInvalidToken,
  kIndexOutOfRange,
  kParse,
  kIo,
  kCorruption,
  kDoubleObfuscation,
  kKey,
  kInconsistency,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Container decoding failure; offset is the byte position where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : Error(ErrorCode::kParse, what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidDimension: return "invalid-dimension";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kDimensionMismatch: return "dimension-error";
    case ErrorCode::kSingularMatrix: return "singular-matrix";
    case ErrorCode::kUnsupportedArchitecture: return "unsupported-architecture";
    case ErrorCode::kCacheInconsistency: return "cache-inconsistency";
    case ErrorCode::kInvalidToken: return "invalid-token";
    case ErrorCode::kIndexOutOfRange: return "index-error";
    case ErrorCode::kParse: return "parse-error";
    case ErrorCode::kIo: return "io-error";
    case ErrorCode::kCorruption: return "corruption";
    case ErrorCode::kDoubleObfuscation: return "double-obfuscation";
    case ErrorCode::kKey: return "key-error";
    case ErrorCode::kInconsistency: return "inconsistency";
  }
  return "unknown";
}

}  // namespace kvlab
