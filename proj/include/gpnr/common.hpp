#pragma once

#include <stdexcept>
#include <string>

namespace gpnr {

// Error taxonomy mirrors the CLI exit-code contract:
//   config_error  -> exit 2 (usage, config, malformed input files)
//   numeric_error -> exit 3 (non-finite loss, failed numeric property)
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gpnr
