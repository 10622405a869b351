#include "dadt/cli/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>

namespace dadt::cli {

spdlog::logger& log() {
  static const auto logger = [] {
    auto l = spdlog::stderr_logger_mt("dadt");
    l->set_pattern("[%H:%M:%S] %^%l%$ %v");
    return l;
  }();
  return *logger;
}

}  // namespace dadt::cli
