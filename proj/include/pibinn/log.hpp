#pragma once

#include <string_view>

namespace pibinn::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

/// Reads PIBINN_LOG (error|info|debug); unset means info. Returns false for
/// an unrecognized value and leaves the level unchanged.
bool init_from_env();
void set_level(Level level) noexcept;
Level level() noexcept;
bool enabled(Level level) noexcept;

void error(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace pibinn::log
