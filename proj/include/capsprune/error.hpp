#pragma once

#include <stdexcept>
#include <string>

namespace capsprune {

// Base for all errors thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up for an operation.
struct DimensionError : Error {
    using Error::Error;
};

// An argument violates an operation precondition.
struct ArgumentError : Error {
    using Error::Error;
};

// A computation produced a NaN or infinity from finite inputs.
struct NumericError : Error {
    using Error::Error;
};

// A container invariant was broken (ranking keys, survivor lists, ...).
struct InvariantError : Error {
    using Error::Error;
};

// Malformed input bytes (IDX, CIFAR records).
struct ParseError : Error {
    using Error::Error;
};

// Filesystem-level failure.
struct IoError : Error {
    using Error::Error;
};

// Checkpoint-specific load failures, each distinctly typed.
struct CheckpointError : Error {
    using Error::Error;
};
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct VersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct LengthError : CheckpointError {
    using CheckpointError::CheckpointError;
};

}  // namespace capsprune
