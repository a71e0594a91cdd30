#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eio {

// Coarse failure classes. The CLI maps each to a distinct exit code and prints
// the lowercase name so callers can branch on it.
enum class ErrorCategory {
  parse,
  validation,
  shape,
  infeasible,
  io,
  corrupt,
  config,
  usage,
};

std::string_view category_name(ErrorCategory c) noexcept;
int exit_code(ErrorCategory c) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& message) {
  throw Error(c, message);
}

inline void require(bool condition, ErrorCategory c, const std::string& message) {
  if (!condition) throw Error(c, message);
}

}  // namespace eio
