#pragma once

#include <string>
#include <vector>

namespace quadra {

/// Emits a warning to stderr (unless silenced) and keeps it in a per-thread
/// buffer so callers and tests can inspect what was reported.
void warn(const std::string& component, const std::string& message);

std::vector<std::string> take_warnings();
void set_warnings_to_stderr(bool enabled);

}  // namespace quadra
