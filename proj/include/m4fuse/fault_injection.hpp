#pragma once

#include <atomic>
#include <string>

#include "m4fuse/errors.hpp"

namespace m4fuse {

/// Deliberate corruptions used by the acceptance harness to prove that its
/// oracle suites are not vacuous. Never set outside of mutation runs.
enum class Fault { none, abar_formula, gate_sigmoid };

inline std::atomic<Fault>& active_fault() {
  static std::atomic<Fault> f{Fault::none};
  return f;
}

class ScopedFault {
 public:
  explicit ScopedFault(Fault f) : prev_(active_fault().exchange(f)) {}
  ~ScopedFault() { active_fault().store(prev_); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault prev_;
};

inline Fault parse_fault(const std::string& s) {
  if (s == "none") return Fault::none;
  if (s == "abar") return Fault::abar_formula;
  if (s == "gate") return Fault::gate_sigmoid;
  throw ConfigError("unknown fault '" + s + "' (expected none|abar|gate)");
}

}  // namespace m4fuse
