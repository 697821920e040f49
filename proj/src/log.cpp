#include "pibinn/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace pibinn::log {
namespace {

std::atomic<int> g_level{static_cast<int>(Level::Info)};
std::mutex g_mutex;

void write(const char* tag, std::string_view msg) {
  std::lock_guard lock(g_mutex);
  std::cerr << "[" << tag << "] " << msg << '\n';
}

}  // namespace

bool init_from_env() {
  const char* v = std::getenv("PIBINN_LOG");
  if (!v || !*v) return true;
  const std::string s(v);
  if (s == "error") set_level(Level::Error);
  else if (s == "info") set_level(Level::Info);
  else if (s == "debug") set_level(Level::Debug);
  else return false;
  return true;
}

void set_level(Level level) noexcept { g_level = static_cast<int>(level); }
Level level() noexcept { return static_cast<Level>(g_level.load()); }
bool enabled(Level l) noexcept { return static_cast<int>(l) <= g_level.load(); }

void error(std::string_view msg) { write("error", msg); }
void info(std::string_view msg) {
  if (enabled(Level::Info)) write("info", msg);
}
void debug(std::string_view msg) {
  if (enabled(Level::Debug)) write("debug", msg);
}

}  // namespace pibinn::log
