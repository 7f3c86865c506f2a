// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mstream {

enum class Err {
  DegenerateRotation,
  DimensionError,
  TooShort,
  PaddingRequired,
  ConfigError,
  TokenError,
  NumericalError,
  AlignmentError,
  MaskError,
  LabelError,
  DegenerateEmbedding,
  NotInitialized,
  IOError,
  UsageError,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::DegenerateRotation: return "DegenerateRotation";
    case Err::DimensionError: return "DimensionError";
    case Err::TooShort: return "TooShort";
    case Err::PaddingRequired: return "PaddingRequired";
    case Err::ConfigError: return "ConfigError";
    case Err::TokenError: return "TokenError";
    case Err::NumericalError: return "NumericalError";
    case Err::AlignmentError: return "AlignmentError";
    case Err::MaskError: return "MaskError";
    case Err::LabelError: return "LabelError";
    case Err::DegenerateEmbedding: return "DegenerateEmbedding";
    case Err::NotInitialized: return "NotInitialized";
    case Err::IOError: return "IOError";
    case Err::UsageError: return "UsageError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& msg) { throw Error(code, msg); }

}  // namespace mstream
