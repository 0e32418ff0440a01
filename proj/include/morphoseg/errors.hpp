#pragma once

#include <stdexcept>
#include <string>

namespace morphoseg {

/// Base class for every error raised by the library. The CLI maps the three
/// families below onto process exit codes (config 2, data 3, numerical 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Bad input data: undecodable files, shape mismatches, labels out of range,
/// uncovered tiles, malformed checkpoints or manifests.
class DataError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace morphoseg
