#pragma once

// Error taxonomy shared by the library and the command line tool. The tool
// maps these to process exit codes: config_error -> 2, numeric_error -> 3,
// artifact_error -> 4. Plain std::invalid_argument marks programming-level
// precondition violations and also maps to 2 at the tool boundary.

#include <stdexcept>
#include <string>

namespace snapuq {

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct artifact_error : std::runtime_error {
    explicit artifact_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace snapuq
