#include "isg/errors.hpp"

namespace isg {

const char* err_name(Err code) {
  switch (code) {
    case Err::FileNotFound: return "FileNotFound";
    case Err::UnsupportedFormat: return "UnsupportedFormat";
    case Err::CorruptImage: return "CorruptImage";
    case Err::CorruptData: return "CorruptData";
    case Err::PatchLargerThanImage: return "PatchLargerThanImage";
    case Err::NonDivisibleSpec: return "NonDivisibleSpec";
    case Err::EmptyPatch: return "EmptyPatch";
    case Err::UnknownMethod: return "UnknownMethod";
    case Err::EmptyHistogram: return "EmptyHistogram";
    case Err::NoRecords: return "NoRecords";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::NonFiniteValue: return "NonFiniteValue";
    case Err::WrongPatchSize: return "WrongPatchSize";
    case Err::EmptyDataset: return "EmptyDataset";
    case Err::DivergedLoss: return "DivergedLoss";
    case Err::LengthMismatch: return "LengthMismatch";
    case Err::ConstantInput: return "ConstantInput";
    case Err::SingleClass: return "SingleClass";
    case Err::NegativeInput: return "NegativeInput";
    case Err::TooFewSlides: return "TooFewSlides";
    case Err::EmptyTokenList: return "EmptyTokenList";
    case Err::TooManyTokens: return "TooManyTokens";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::MissingArtifact: return "MissingArtifact";
    case Err::ChecksumMismatch: return "ChecksumMismatch";
    case Err::UnknownKind: return "UnknownKind";
  }
  return "Unknown";
}

}  // namespace isg
