#include "csdm/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace csdm::log {
namespace {
std::atomic<Level> g_level{Level::warn};
std::atomic<std::size_t> g_warnings{0};
std::mutex g_mutex;

void emit(std::string_view tag, std::string_view msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  std::cerr << "[csdm " << tag << "] " << msg << '\n';
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void warn(std::string_view msg) {
  ++g_warnings;
  if (g_level >= Level::warn) emit("warn", msg);
}
void info(std::string_view msg) {
  if (g_level >= Level::info) emit("info", msg);
}
void debug(std::string_view msg) {
  if (g_level >= Level::debug) emit("debug", msg);
}

std::size_t warning_count() { return g_warnings; }
void reset_warning_count() { g_warnings = 0; }

}  // namespace csdm::log
