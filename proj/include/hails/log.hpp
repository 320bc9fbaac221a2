#pragma once

#include <functional>
#include <string>

namespace hails {

using WarningSink = std::function<void(const std::string&)>;

/// Replaces the process-wide warning sink. Passing an empty function silences
/// warnings. Returns the previous sink. The default writes to stderr.
WarningSink set_warning_sink(WarningSink sink);

void warn(const std::string& message);

}  // namespace hails
