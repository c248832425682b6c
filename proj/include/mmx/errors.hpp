#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mmx {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the operation's domain (bad class id, m > N, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Input that collapses to a point or a zero vector.
class DegenerateError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class CacheError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed binary file; `offset()` is the byte position where decoding failed.
class FormatError : public Error {
public:
    FormatError(std::uint64_t offset, const std::string& what)
        : Error("format error at byte offset " + std::to_string(offset) + ": " + what),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// Non-finite value met during optimization.
class NumericError : public Error {
public:
    NumericError(std::uint64_t step, std::string tensor, std::size_t index, const std::string& what)
        : Error("numeric failure at step " + std::to_string(step) + " in " + tensor + "[" +
                std::to_string(index) + "]: " + what),
          step_(step),
          tensor_(std::move(tensor)),
          index_(index) {}

    std::uint64_t step() const noexcept { return step_; }
    const std::string& tensor() const noexcept { return tensor_; }
    std::size_t index() const noexcept { return index_; }

private:
    std::uint64_t step_;
    std::string tensor_;
    std::size_t index_;
};

} // namespace mmx
