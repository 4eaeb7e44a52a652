#pragma once

#include <stdexcept>
#include <string>

namespace catmae {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension violations.
struct ShapeError : Error {
    using Error::Error;
};

// Bad configuration values (CLI exit code 1).
struct ConfigError : Error {
    using Error::Error;
};

// Dataset / file problems (CLI exit code 2).
struct DataError : Error {
    enum class Kind {
        missing,       // path does not exist
        undecodable,   // file exists but cannot be parsed
        dim_mismatch,  // frames within a clip disagree on size
        empty,         // clip or dataset has no content
        too_short,     // clip too short for the requested sampling
        layout,        // directory layout violates the documented scheme
    };
    Kind kind;
    DataError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Numeric failures: non-finite values, diverged training (CLI exit code 3).
struct NumericError : Error {
    using Error::Error;
};

// Checkpoint container problems.
struct CheckpointError : Error {
    enum class Kind {
        io,             // cannot open / read / write
        bad_magic,      // not a checkpoint file
        version,        // format version mismatch
        truncated,      // file shorter than the directory promises / bad CRC
        unknown_tensor, // tensor name not expected by the target model
        missing_tensor, // expected tensor absent from the file
    };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

}  // namespace catmae
