#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dropletscope {

/// Bad caller input: dimensions, ranges, empty collections.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed values inside otherwise well-formed data (NaN entries, zero sums).
class InvalidData : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary or text file that cannot be decoded. Carries the byte offset where
/// decoding stopped.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf during a numeric stage, or a geometry with no usable extent.
class NumericFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class LookupError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dropletscope
