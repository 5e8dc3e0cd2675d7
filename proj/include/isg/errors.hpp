#pragma once

#include <stdexcept>
#include <string>

namespace isg {

// Error canon shared by all modules. The CLI maps these onto exit codes.
enum class Err {
  FileNotFound,
  UnsupportedFormat,
  CorruptImage,
  CorruptData,
  PatchLargerThanImage,
  NonDivisibleSpec,
  EmptyPatch,
  UnknownMethod,
  EmptyHistogram,
  NoRecords,
  ShapeMismatch,
  NonFiniteValue,
  WrongPatchSize,
  EmptyDataset,
  DivergedLoss,
  LengthMismatch,
  ConstantInput,
  SingleClass,
  NegativeInput,
  TooFewSlides,
  EmptyTokenList,
  TooManyTokens,
  InvalidConfig,
  MissingArtifact,
  ChecksumMismatch,
  UnknownKind,
};

const char* err_name(Err code);

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace isg
