#pragma once

#include <stdexcept>
#include <string>

namespace ulr {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable input files.
class IoError : public Error {
public:
    using Error::Error;
};

/// A numerical guard tripped (non-finite loss or gradient, degenerate vector).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace ulr
