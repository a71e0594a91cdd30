#include "eio/error.hpp"

namespace eio {

std::string_view category_name(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::infeasible: return "infeasible";
    case ErrorCategory::io: return "io";
    case ErrorCategory::corrupt: return "corrupt";
    case ErrorCategory::config: return "config";
    case ErrorCategory::usage: return "usage";
  }
  return "unknown";
}

int exit_code(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::usage: return 2;
    case ErrorCategory::config: return 3;
    case ErrorCategory::validation: return 3;
    case ErrorCategory::parse: return 4;
    case ErrorCategory::io: return 5;
    case ErrorCategory::corrupt: return 6;
    case ErrorCategory::shape: return 7;
    case ErrorCategory::infeasible: return 8;
  }
  return 1;
}

}  // namespace eio
