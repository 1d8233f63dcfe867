#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trustlens {

// Distinct failure categories. The CLI maps these onto exit codes.
enum class ErrorCode {
  invalid_argument,
  out_of_range,
  bad_magic,
  bad_version,
  truncated,
  dimension_mismatch,
  layout_mismatch,
  nan_payload,
  schema,
  no_input,
  empty_saliency,
  undefined_contribution,
  incomplete_table,
  division_by_zero,
  degenerate_labels,
  empty_dataset,
  numeric,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::bad_version: return "bad_version";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::layout_mismatch: return "layout_mismatch";
    case ErrorCode::nan_payload: return "nan_payload";
    case ErrorCode::schema: return "schema";
    case ErrorCode::no_input: return "no_input";
    case ErrorCode::empty_saliency: return "empty_saliency";
    case ErrorCode::undefined_contribution: return "undefined_contribution";
    case ErrorCode::incomplete_table: return "incomplete_table";
    case ErrorCode::division_by_zero: return "division_by_zero";
    case ErrorCode::degenerate_labels: return "degenerate_labels";
    case ErrorCode::empty_dataset: return "empty_dataset";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace trustlens
