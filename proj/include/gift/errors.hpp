#pragma once

#include <stdexcept>
#include <string>

namespace gift {

/// Base class for all library errors.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Missing or unreadable input (CLI exit code 2).
class io_error : public error {
public:
    explicit io_error(const std::string& msg) : error(msg) {}
};

/// Dimension or shape mismatch (CLI exit code 3).
class shape_error : public error {
public:
    explicit shape_error(const std::string& msg) : error(msg) {}
};

/// Malformed or corrupted file contents (CLI exit code 4).
class format_error : public error {
public:
    explicit format_error(const std::string& msg) : error(msg) {}
};

} // namespace gift
