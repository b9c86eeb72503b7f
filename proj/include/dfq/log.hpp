// SPDX-License-Identifier: Apache-2.0
/**
 * @file   log.hpp
 * @brief  Process-wide diagnostic sink (training logs, calibration warnings).
 */
#pragma once

#include <functional>
#include <string>

namespace dfq {

enum class LogLevel { Info, Warning };

using LogSink = std::function<void(LogLevel, const std::string &)>;

/// Replaces the sink; returns the previous one. The default writes warnings
/// to stderr and drops info lines unless verbose logging is enabled.
LogSink set_log_sink(LogSink sink);
void set_verbose(bool verbose);

void log_info(const std::string &msg);
void log_warning(const std::string &msg);

} // namespace dfq
