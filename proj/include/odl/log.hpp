#pragma once

#include <atomic>
#include <string_view>

namespace odl {

// Warnings go to stderr unless silenced; the counter is process-wide.
void warn(std::string_view message);
std::size_t warning_count();
void set_quiet(bool quiet);

}  // namespace odl
