#pragma once

#include <stdexcept>
#include <string>

namespace lipcert {

/// Malformed model directory, manifest or dataset file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operator dimensions that do not compose.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN or infinity met during a computation (usually corrupt weights or a
/// diverged training run).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace lipcert
