#pragma once

#include <stdexcept>
#include <string>

namespace trm {

enum class ErrorCode {
  ParseError,
  GridBoundsError,
  TranslationOverflow,
  InsufficientAugmentationSpace,
  TooFewTasks,
  UnknownTaskId,
  IndexOutOfRange,
  NonFiniteActivation,
  NonFiniteLoss,
  NonFiniteGradient,
  ModeMismatch,
  EmptyPretrainedTable,
  BudgetExhausted,
  StrategyConfigError,
  EmptyPredictionSet,
  MissingSolution,
  WeightLengthMismatch,
  ContinuedPretrainMappingLost,
  ZeroNormEmbedding,
  ConfigError,
  IoError,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::GridBoundsError: return "GridBoundsError";
    case ErrorCode::TranslationOverflow: return "TranslationOverflow";
    case ErrorCode::InsufficientAugmentationSpace: return "InsufficientAugmentationSpace";
    case ErrorCode::TooFewTasks: return "TooFewTasks";
    case ErrorCode::UnknownTaskId: return "UnknownTaskId";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::ModeMismatch: return "ModeMismatch";
    case ErrorCode::EmptyPretrainedTable: return "EmptyPretrainedTable";
    case ErrorCode::BudgetExhausted: return "BudgetExhausted";
    case ErrorCode::StrategyConfigError: return "StrategyConfigError";
    case ErrorCode::EmptyPredictionSet: return "EmptyPredictionSet";
    case ErrorCode::MissingSolution: return "MissingSolution";
    case ErrorCode::WeightLengthMismatch: return "WeightLengthMismatch";
    case ErrorCode::ContinuedPretrainMappingLost: return "ContinuedPretrainMappingLost";
    case ErrorCode::ZeroNormEmbedding: return "ZeroNormEmbedding";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace trm
