#pragma once

#include <stdexcept>
#include <string>

namespace axon {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid dimensions, spacings, or tensor shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value lies outside the domain an operation accepts
/// (wrong intensity domain, out-of-range timestep, bad parameter).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

enum class IoErrorKind { Open, Write, BadMagic, UnknownVersion, Truncated, Format };

inline const char* to_string(IoErrorKind k) {
    switch (k) {
    case IoErrorKind::Open: return "open";
    case IoErrorKind::Write: return "write";
    case IoErrorKind::BadMagic: return "bad-magic";
    case IoErrorKind::UnknownVersion: return "unknown-version";
    case IoErrorKind::Truncated: return "truncated";
    case IoErrorKind::Format: return "format";
    }
    return "unknown";
}

class IoError : public Error {
public:
    IoError(IoErrorKind kind, const std::string& what)
        : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    IoErrorKind kind() const noexcept { return kind_; }

private:
    IoErrorKind kind_;
};

} // namespace axon
