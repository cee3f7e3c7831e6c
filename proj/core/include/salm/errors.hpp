#pragma once

#include <stdexcept>
#include <string>

namespace salm {

// Invalid user input: bad config values, malformed files, unknown keys.
// The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values encountered during training or evaluation.
// The CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace salm
