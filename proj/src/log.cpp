#include "quadra/log.hpp"

#include <atomic>
#include <iostream>
#include <utility>

namespace quadra {

namespace {

thread_local std::vector<std::string> t_warnings;
std::atomic<bool> g_to_stderr{true};

}  // namespace

void warn(const std::string& component, const std::string& message) {
  std::string line = component + ": warning: " + message;
  if (g_to_stderr.load()) std::cerr << line << '\n';
  t_warnings.push_back(std::move(line));
}

std::vector<std::string> take_warnings() { return std::exchange(t_warnings, {}); }

void set_warnings_to_stderr(bool enabled) { g_to_stderr.store(enabled); }

}  // namespace quadra
