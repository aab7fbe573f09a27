#pragma once

#include <stdexcept>
#include <string>

namespace feddf {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Dimension or prototype mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Invalid configuration; `field()` names the offending key when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg, std::string field = {})
        : Error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Violated operation precondition (empty inputs, unequal sample sizes, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

}  // namespace feddf
