#pragma once
// Error taxonomy shared by the library and the CLI. The CLI maps each type to
// a stable exit code: config/usage 2, I/O 3, parse 4, missing dependency 5.

#include <stdexcept>
#include <string>

namespace gals {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& m) : std::runtime_error(m) {}
};

struct MissingDependency : std::runtime_error {
    explicit MissingDependency(const std::string& m) : std::runtime_error(m) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace gals
