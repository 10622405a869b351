#pragma once

#include <spdlog/spdlog.h>

namespace dadt::cli {

/// Shared stderr logger; results never go through it.
spdlog::logger& log();

}  // namespace dadt::cli
