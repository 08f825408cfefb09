#pragma once

#include <stdexcept>
#include <string>

namespace stackunet {

/// Invalid configuration, shapes, or argument values. CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Missing or unreadable files, malformed manifests. CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training aborts (non-finite loss, empty split).
class TrainError : public std::runtime_error {
public:
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stackunet
