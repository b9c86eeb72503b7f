// SPDX-License-Identifier: Apache-2.0
#include <dfq/log.hpp>

#include <iostream>
#include <mutex>

namespace dfq {

namespace {

std::mutex g_mutex;
bool g_verbose = false;

void default_sink(LogLevel level, const std::string &msg) {
  if (level == LogLevel::Warning)
    std::cerr << "warning: " << msg << '\n';
  else if (g_verbose)
    std::cerr << msg << '\n';
}

LogSink g_sink = default_sink;

void emit(LogLevel level, const std::string &msg) {
  std::lock_guard lock(g_mutex);
  if (g_sink)
    g_sink(level, msg);
}

} // namespace

LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(g_mutex);
  LogSink prev = std::move(g_sink);
  g_sink = sink ? std::move(sink) : LogSink(default_sink);
  return prev;
}

void set_verbose(bool verbose) {
  std::lock_guard lock(g_mutex);
  g_verbose = verbose;
}

void log_info(const std::string &msg) { emit(LogLevel::Info, msg); }
void log_warning(const std::string &msg) { emit(LogLevel::Warning, msg); }

} // namespace dfq
