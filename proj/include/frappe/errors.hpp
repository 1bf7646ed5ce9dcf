#pragma once

#include <stdexcept>
#include <string>

namespace frappe {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string &msg) : std::runtime_error(msg) {}
};

// Tensor rank/dimension disagreements. The message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// log/sqrt of negative input and friends.
struct DomainError : Error {
    using Error::Error;
};

// Out-of-range timestep, token id, row index.
struct IndexError : Error {
    using Error::Error;
};

// Invalid hyperparameters or incompatible component configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss, inf logits).
struct NumericError : Error {
    using Error::Error;
};

// Bad magic, truncated stream, duplicate names, version mismatch.
struct FormatError : Error {
    using Error::Error;
};

// Structurally valid file whose content violates a training precondition.
struct DataError : Error {
    using Error::Error;
};

// Filesystem failures; message carries the path.
struct IoError : Error {
    using Error::Error;
};

}  // namespace frappe
