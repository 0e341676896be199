#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace endosynth {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class CategoryError : public ParseError {
public:
    using ParseError::ParseError;
};

class RangeError : public ParseError {
public:
    using ParseError::ParseError;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace endosynth
