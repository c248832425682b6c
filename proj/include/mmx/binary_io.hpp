#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "mmx/errors.hpp"

namespace mmx {

/// Little-endian byte sink for the MMPD/MMEC/MMCK formats.
class ByteWriter {
public:
    void magic(std::string_view tag) { buf_.append(tag.data(), tag.size()); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { put_le(v, 2); }
    void u32(std::uint32_t v) { put_le(v, 4); }
    void u64(std::uint64_t v) { put_le(v, 8); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }

    const std::string& bytes() const noexcept { return buf_; }

private:
    void put_le(std::uint64_t v, int n) {
        for (int k = 0; k < n; ++k) {
            buf_.push_back(static_cast<char>((v >> (8 * k)) & 0xFFu));
        }
    }

    std::string buf_;
};

/// Bounds-checked little-endian reader; every failure carries the byte offset.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    void expect_magic(std::string_view tag) {
        require(tag.size(), "magic");
        if (data_.substr(pos_, tag.size()) != tag) {
            throw FormatError(pos_, "bad magic, expected '" + std::string(tag) + "'");
        }
        pos_ += tag.size();
    }

    void expect_version(std::uint16_t expected) {
        const auto at = pos_;
        const auto v = u16();
        if (v != expected) {
            throw FormatError(at, "unsupported version " + std::to_string(v) + ", expected " +
                                      std::to_string(expected));
        }
    }

    std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1, "u8")); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2, "u16")); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4, "u32")); }
    std::uint64_t u64() { return get_le(8, "u64"); }
    double f64() { return std::bit_cast<double>(get_le(8, "f64")); }

    std::uint64_t offset() const noexcept { return pos_; }
    std::uint64_t size() const noexcept { return data_.size(); }
    bool at_end() const noexcept { return pos_ == data_.size(); }

    /// Fails unless `n` more bytes are available.
    void require(std::uint64_t n, std::string_view what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(pos_, "truncated " + std::string(what) + ": expected " +
                                        std::to_string(pos_ + n) + " bytes, file has " +
                                        std::to_string(data_.size()));
        }
    }

    void expect_end() const {
        if (!at_end()) {
            throw FormatError(pos_, std::to_string(data_.size() - pos_) + " trailing bytes");
        }
    }

private:
    std::uint64_t get_le(int n, std::string_view what) {
        require(static_cast<std::uint64_t>(n), what);
        std::uint64_t v = 0;
        for (int k = 0; k < n; ++k) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + k])) << (8 * k);
        }
        pos_ += static_cast<std::uint64_t>(n);
        return v;
    }

    std::string_view data_;
    std::uint64_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for '" + path.string() + "'");
    }
}

} // namespace mmx
