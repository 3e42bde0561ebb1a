#pragma once

#include <stdexcept>
#include <string>

namespace servesim {

/// Input/config/data errors. Messages name the offending field, row or op.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Internal invariant violations (bugs), distinct from bad input.
class InternalError : public std::logic_error {
public:
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

inline void internal_check(bool cond, const std::string& msg) {
    if (!cond) throw InternalError(msg);
}

}  // namespace servesim
