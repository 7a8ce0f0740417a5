#pragma once

#include <stdexcept>
#include <string>

namespace einet {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent region graph.
struct StructureError : Error {
    using Error::Error;
};

/// Parameter or argument shapes that do not fit the compiled circuit.
struct ConfigError : Error {
    using Error::Error;
};

/// A data value outside the support of its leaf family.
struct InputError : Error {
    using Error::Error;
};

/// Numerical failure inside a forward/backward pass.
struct EngineError : Error {
    using Error::Error;
};

/// API called out of order (e.g. backward before forward).
struct UsageError : Error {
    using Error::Error;
};

/// Evidence with zero probability under the model.
struct EvidenceError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    using Error::Error;
};

/// Model/dataset file problems. Each subtype is a distinct failure mode.
struct FormatError : Error {
    using Error::Error;
};
struct MagicError : FormatError {
    using FormatError::FormatError;
};
struct ChecksumError : FormatError {
    using FormatError::FormatError;
};
struct ShapeError : FormatError {
    using FormatError::FormatError;
};

}  // namespace einet
