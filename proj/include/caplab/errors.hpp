#pragma once

#include <stdexcept>
#include <string>

namespace caplab {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible tensor shapes; message names both shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A vector too close to zero to normalize (collapsed embedding).
class DegenerateVectorError : public Error {
public:
    using Error::Error;
};

// Invalid argument value (tau <= 0, zero samples, bad knob range, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent input data (missing caption index, empty corpus).
class DataError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during optimization.
class DivergedError : public Error {
public:
    using Error::Error;
};

// Learning-rate schedule queried past its final step.
class ScheduleError : public Error {
public:
    using Error::Error;
};

// Bad or unreadable on-disk artifact (checksum, magic, version).
class SerializationError : public Error {
public:
    using Error::Error;
};

// Remote endpoint unreachable or replied with garbage.
class TransportError : public Error {
public:
    TransportError(const std::string& what, int attempts)
        : Error(what), attempts_(attempts) {}
    int attempts() const { return attempts_; }

private:
    int attempts_;
};

// Invalid experiment configuration (unknown key, wrong point type).
class ConfigError : public Error {
public:
    using Error::Error;
};

// A probe task that cannot be scored (e.g. single-class labels).
class DegenerateTaskError : public Error {
public:
    using Error::Error;
};

// Report rows from different plans mixed into one aggregation.
class AggregationError : public Error {
public:
    using Error::Error;
};

} // namespace caplab
