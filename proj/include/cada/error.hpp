#pragma once

#include <stdexcept>
#include <string>

namespace cada {

// Failure categories; the CLI maps them onto process exit codes.
enum class ErrorKind {
    Usage = 1,      // bad flags, incompatible options
    Data = 2,       // unreadable/invalid files, validation failures
    Numerical = 3,  // non-finite values, undefined metrics, diverged training
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace cada
