#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace ssd {

/// Base error for all toolkit failures. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

namespace detail {
template <class... Parts>
std::string cat(Parts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}
}  // namespace detail

template <class... Parts>
[[noreturn]] void fail(Parts&&... parts) {
  throw Error(detail::cat(std::forward<Parts>(parts)...));
}

template <class... Parts>
void check(bool condition, Parts&&... parts) {
  if (!condition) fail(std::forward<Parts>(parts)...);
}

}  // namespace ssd
