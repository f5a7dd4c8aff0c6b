#pragma once

#include <string_view>

namespace stvg::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

// Threshold comes from STVG_LOG (debug|info|warn|error|off), default info.
Level threshold();
void set_threshold(Level l);
void write(Level l, std::string_view msg);

inline void debug(std::string_view m) { write(Level::Debug, m); }
inline void info(std::string_view m) { write(Level::Info, m); }
inline void warn(std::string_view m) { write(Level::Warn, m); }
inline void error(std::string_view m) { write(Level::Error, m); }

}  // namespace stvg::log
