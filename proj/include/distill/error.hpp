#pragma once

#include <stdexcept>
#include <string>

namespace distill {

// Raised when an input violates a documented precondition or invariant.
// The message names the violated constraint.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed experiment-config text. Carries the line (1-based, 0 if unknown)
// and the key path being read when the problem was found.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line, std::string key)
        : std::runtime_error(what), line_(line), key_(std::move(key)) {}

    std::size_t line() const noexcept { return line_; }
    const std::string& key() const noexcept { return key_; }

private:
    std::size_t line_;
    std::string key_;
};

} // namespace distill
