#pragma once

#include <stdexcept>
#include <string>

namespace forgetbench {

// Root of every error the library throws. The CLI maps the subclasses onto
// process exit codes (see cli/commands.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that do not compose.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Class label, token id or similar index outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

// A forward op produced NaN or Inf from finite inputs.
class NumericError : public Error {
public:
    using Error::Error;
};

// Misuse of the tape: double backward, detached loss, all-pad sequence.
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class IncompleteRunError : public Error {
public:
    using Error::Error;
};

}  // namespace forgetbench
