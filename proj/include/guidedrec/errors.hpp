#pragma once

#include <stdexcept>
#include <string>

namespace guidedrec {

// Bad arguments or mismatched shapes. The CLI maps this to exit code 2.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed file contents. `field()` names the header field or payload
// section that failed to parse.
class ParseError : public std::runtime_error {
public:
    ParseError(std::string field, const std::string& what)
        : std::runtime_error(what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Non-finite input data.
class DataIntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A non-finite value showed up inside an optimization. `term()` names the
// first objective term (or gradient block) that went bad.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string term, const std::string& what)
        : std::runtime_error(what), term_(std::move(term)) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

}  // namespace guidedrec
