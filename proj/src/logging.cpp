#include "stvg/logging.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace stvg::log {
namespace {

std::optional<Level> g_level;

Level from_env() {
  const char* v = std::getenv("STVG_LOG");
  if (!v) return Level::Info;
  const std::string s(v);
  if (s == "debug") return Level::Debug;
  if (s == "warn") return Level::Warn;
  if (s == "error") return Level::Error;
  if (s == "off") return Level::Off;
  return Level::Info;
}

constexpr const char* kNames[] = {"debug", "info", "warn", "error"};

}  // namespace

Level threshold() {
  if (!g_level) g_level = from_env();
  return *g_level;
}

void set_threshold(Level l) { g_level = l; }

void write(Level l, std::string_view msg) {
  if (l < threshold() || l == Level::Off) return;
  std::cerr << '[' << kNames[static_cast<int>(l)] << "] " << msg << '\n';
}

}  // namespace stvg::log
