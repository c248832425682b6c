#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mmx/binary_io.hpp"
#include "mmx/encoder.hpp"

namespace mmx {

inline constexpr std::string_view kCheckpointMagic = "MMCK";
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    EncoderParams params;
    double rho = 0.0;  // log-temperature of the owning stage
    std::uint64_t step = 0;
};

inline std::string encode_checkpoint(const EncoderParams& params, double rho, std::uint64_t step) {
    ByteWriter w;
    w.magic(kCheckpointMagic);
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.hidden()));
    w.u32(static_cast<std::uint32_t>(params.dim()));
    for (auto t : tensors(params)) {
        for (double x : t) w.f64(x);
    }
    w.u64(step);
    w.f64(rho);
    return w.bytes();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(kCheckpointMagic);
    r.expect_version(kCheckpointVersion);
    const std::uint32_t h = r.u32();
    const std::uint32_t d = r.u32();
    if (h == 0 || d == 0) throw FormatError(r.offset() - 8, "zero hidden width or dimension");
    const std::uint64_t floats = 3ull * h + h + 1ull * h * h + h + 1ull * d * h + d;
    const std::uint64_t expected = r.offset() + floats * 8 + 16;
    if (bytes.size() != expected) {
        throw FormatError(bytes.size() < expected ? bytes.size() : expected,
                          "checkpoint length " + std::to_string(bytes.size()) + " bytes, expected " +
                              std::to_string(expected) + " for h=" + std::to_string(h) +
                              ", d=" + std::to_string(d));
    }
    Checkpoint ck{EncoderParams::zeros(h, d), 0.0, 0};
    for (auto t : tensors(ck.params)) {
        for (double& x : t) x = r.f64();
    }
    ck.step = r.u64();
    ck.rho = r.f64();
    r.expect_end();
    return ck;
}

inline void save_checkpoint(const EncoderParams& params, double rho, std::uint64_t step,
                            const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(params, rho, step));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

/// Loads and checks the encoder shape against what the caller was configured for.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::size_t hidden,
                                  std::size_t dim) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.params.hidden() != hidden || ck.params.dim() != dim) {
        throw ShapeError("checkpoint '" + path.string() + "' has h=" +
                         std::to_string(ck.params.hidden()) + ", d=" + std::to_string(ck.params.dim()) +
                         " but the config expects h=" + std::to_string(hidden) +
                         ", d=" + std::to_string(dim));
    }
    return ck;
}

} // namespace mmx
