#pragma once

#include <stdexcept>
#include <string>

namespace clwf {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor dimensions do not conform to an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A value became NaN or infinite.
class NumericError : public Error {
public:
    using Error::Error;
};

// An object was used in a way its lifecycle forbids.
class StateError : public Error {
public:
    using Error::Error;
};

// A task, parameter, split or key does not exist.
class LookupError : public Error {
public:
    using Error::Error;
};

// An id that must be unique was registered twice.
class ConflictError : public Error {
public:
    using Error::Error;
};

// Two structures that must agree (names, shapes, kinds) do not.
class ContractError : public Error {
public:
    using Error::Error;
};

// A caller-supplied argument is invalid.
class ArgumentError : public Error {
public:
    using Error::Error;
};

// A serialized container is malformed.
class FormatError : public Error {
public:
    using Error::Error;
};

// Filesystem failure, reported with path context.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace clwf
