#pragma once

#include <stdexcept>
#include <string>

namespace handrec {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/op shape violations; message names the op and both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Bad user input: config fields, CLI values, incompatible checkpoints.
struct ConfigError : Error {
    using Error::Error;
};

// A single task failed (non-finite loss, ineligible writer, ...).
struct TaskError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

} // namespace handrec
