#pragma once

// PASS/FAIL bookkeeping shared by the acceptance binaries: one line per
// criterion, sub-checks listed underneath.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

namespace eio::acceptance {

class Criterion {
 public:
  explicit Criterion(std::string name) : name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}

  bool check(bool ok, const std::string& what) {
    checks_.push_back(std::string(ok ? "  ok   " : "  FAIL ") + what);
    ok_ = ok_ && ok;
    return ok;
  }
  void note(const std::string& what) { checks_.push_back("  ..   " + what); }
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  // Prints the verdict line followed by the sub-checks; returns pass/fail.
  bool finish(double budget_seconds = 0) {
    const double s = seconds();
    if (budget_seconds > 0) check(s <= budget_seconds, "runtime " + fmt(s, 1) + "s <= budget " + fmt(budget_seconds, 0) + "s");
    std::printf("%s %s (%.1fs)\n", ok_ ? "PASS" : "FAIL", name_.c_str(), s);
    for (const auto& c : checks_) std::printf("%s\n", c.c_str());
    std::fflush(stdout);
    return ok_;
  }

  static std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
  }

 private:
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> checks_;
  bool ok_ = true;
};

}  // namespace eio::acceptance
