#pragma once

#include <stdexcept>
#include <string>

namespace dynaguide {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid parameters or configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Incompatible tensor or grid shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid input values (negative where nonnegative is required, zero variance, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced during a numerical procedure.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// STDG container errors.
class FormatError : public Error {
public:
    using Error::Error;
};
class MagicMismatch : public FormatError {
public:
    using FormatError::FormatError;
};
class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedPayload : public FormatError {
public:
    using FormatError::FormatError;
};

/// File missing or unreadable.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace dynaguide
