#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pes {

enum class ErrorCategory {
  config,
  argument,
  shape,
  numeric,
  schema,
  io,
  state,
};

constexpr std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::argument: return "argument";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::schema: return "schema";
    case ErrorCategory::io: return "io";
    case ErrorCategory::state: return "state";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable category.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& what) { throw Error(c, what); }

inline void require(bool ok, ErrorCategory c, const std::string& what) {
  if (!ok) fail(c, what);
}

}  // namespace pes
