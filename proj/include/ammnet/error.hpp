#pragma once

#include <stdexcept>
#include <string>

namespace ammnet {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError -> 2 (usage), DataError/FormatError/IoError -> 3,
//   DimensionError/NumericError/InvariantError -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct InvariantError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct VersionError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace ammnet
