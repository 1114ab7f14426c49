#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cobalt {

// Invalid user-supplied configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Representation collapse detected during concept training (CLI exit code 3).
class CollapseError : public std::runtime_error {
public:
    explicit CollapseError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required on-disk artifact is missing or corrupt (CLI exit code 4).
class ArtifactError : public std::runtime_error {
public:
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& head, const Rest&... rest) {
    os << head;
    format_into(os, rest...);
}

} // namespace detail

template <typename... Args>
std::string strcat(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

// Precondition check for numeric operations; throws std::invalid_argument.
template <typename... Args>
void require(bool cond, const Args&... args) {
    if (!cond) {
        throw std::invalid_argument(strcat(args...));
    }
}

} // namespace cobalt
