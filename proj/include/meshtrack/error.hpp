#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace meshtrack {

// Bad inputs: malformed files, inconsistent shapes, invalid configuration.
// The CLI maps these to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failures during execution (I/O, non-finite values, ...). Exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}

}  // namespace detail

template <typename... Parts>
std::string msg(const Parts&... parts) {
  std::ostringstream os;
  detail::format_into(os, parts...);
  return os.str();
}

template <typename... Parts>
[[noreturn]] void fail_validation(const Parts&... parts) {
  throw ValidationError(msg(parts...));
}

template <typename... Parts>
[[noreturn]] void fail_runtime(const Parts&... parts) {
  throw RuntimeError(msg(parts...));
}

}  // namespace meshtrack
