#pragma once

#include <stdexcept>
#include <string>

namespace seqshort {

// Every error raised by the library derives from Error so callers can map
// families of failures onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class EmptyBagError : public Error {
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

class StratificationError : public DataError {
public:
    using DataError::DataError;
};

class MetricError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class DistributionError : public Error {
public:
    using Error::Error;
};

class TraceError : public Error {
public:
    using Error::Error;
};

class ZeroMassError : public Error {
public:
    using Error::Error;
};

// Binary file format failures (SQBG bags and SQCK checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

class MagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncationError : public FormatError {
public:
    using FormatError::FormatError;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

class ShapeError : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace seqshort
