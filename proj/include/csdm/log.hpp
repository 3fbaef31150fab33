#pragma once

#include <string_view>

namespace csdm::log {

enum class Level { quiet = 0, warn = 1, info = 2, debug = 3 };

void set_level(Level level);
Level level();

void warn(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

// Number of warnings emitted since process start (or the last reset); tests use
// this to check that a warning path was taken.
std::size_t warning_count();
void reset_warning_count();

}  // namespace csdm::log
