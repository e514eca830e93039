#pragma once

#include <stdexcept>
#include <string>

namespace stfbnn {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not chain or match.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller-supplied value is outside its documented domain.
class InputError : public Error {
public:
    using Error::Error;
};

/// An API was used out of order (stale cache, wrong model kind, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long index) : Error(what), index_(index) {}
    /// Epoch (deterministic training) or step (variational training) at which the failure occurred.
    long index() const { return index_; }

private:
    long index_;
};

/// Malformed file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A normalization hit a zero vector.
class SingularityError : public Error {
public:
    SingularityError(const std::string& what, long row) : Error(what), row_(row) {}
    long row() const { return row_; }

private:
    long row_;
};

/// The ReLU activation pattern along a ray never stabilized.
class RegionError : public Error {
public:
    using Error::Error;
};

} // namespace stfbnn
