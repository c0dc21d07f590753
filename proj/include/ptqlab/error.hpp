#pragma once

#include <stdexcept>
#include <string>

namespace ptqlab {

// Coarse failure classes. The CLI maps them onto exit codes.
enum class ErrorKind { validation, numeric, io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Bad shapes, out-of-range arguments, malformed documents.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

// Factorization breakdowns, non-finite intermediate values.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::validation: return 2;
    case ErrorKind::numeric: return 3;
    case ErrorKind::io: return 4;
    }
    return 1;
}

}  // namespace ptqlab
