#pragma once

#include <stdexcept>
#include <string>

namespace mfm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or point dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, divergence, or a failed numerical post-condition.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A caller broke an API precondition (e.g. backward on a non-scalar node).
class ContractError : public Error {
public:
    using Error::Error;
};

/// User-supplied configuration or data failed validation.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Filesystem and parse failures.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace mfm
