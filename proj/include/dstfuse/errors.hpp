#pragma once

#include <stdexcept>
#include <string>

namespace dstfuse {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or rank disagreement between tensor operands.
struct DimensionError : Error {
    using Error::Error;
};

/// A primitive produced or received a non-finite value.
struct NumericError : Error {
    using Error::Error;
};

/// Invalid operation parameter (rates, sizes, enum values).
struct ConfigError : Error {
    using Error::Error;
};

/// Slot or value not present in the ontology.
struct OntologyError : Error {
    using Error::Error;
};

/// Corpus, checkpoint or report content failed validation.
struct ValidationError : Error {
    using Error::Error;
};

/// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace dstfuse
