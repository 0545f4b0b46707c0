#pragma once

#include <stdexcept>
#include <string>

namespace dwiseg {

// Base for all library errors. CLI maps subtypes to exit codes:
// format/validation/geometry/shape -> 3, numeric/training -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or unparseable input file.
struct FormatError : Error {
    using Error::Error;
};

// Recognized but unsupported feature (e.g. NIfTI datatype).
struct UnsupportedError : Error {
    using Error::Error;
};

// Inputs violate a documented precondition (counts, ranges, specs).
struct ValidationError : Error {
    using Error::Error;
};

// Singular or otherwise unusable voxel/world geometry.
struct GeometryError : Error {
    using Error::Error;
};

// Array dimension mismatch between operands.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values or diverging computations.
struct NumericError : Error {
    using Error::Error;
};

// I/O failure with path context.
struct IoError : Error {
    using Error::Error;
};

}  // namespace dwiseg
