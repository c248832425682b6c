#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "mmx/binary_io.hpp"
#include "mmx/geometry.hpp"
#include "mmx/rng.hpp"

namespace mmx {

inline constexpr std::string_view kDatasetMagic = "MMPD";
inline constexpr std::uint16_t kDatasetVersion = 1;

struct DatasetSpec {
    std::uint64_t seed = 0;
    std::uint32_t num_classes = kNumShapes;
    std::size_t size = 0;
    std::size_t points_per_cloud = 256;
    double jitter = 0.0;
    std::uint64_t first_id = 0;
};

/// Round-robin class assignment: sample k gets class k mod C and id first_id + k.
inline std::vector<PointCloud> generate_dataset(const DatasetSpec& spec) {
    if (spec.num_classes == 0 || spec.num_classes > kNumShapes) {
        throw DomainError("num_classes must be in [1, " + std::to_string(kNumShapes) + "]");
    }
    std::vector<PointCloud> out;
    out.reserve(spec.size);
    for (std::size_t k = 0; k < spec.size; ++k) {
        const std::uint64_t id = spec.first_id + k;
        const auto cls = static_cast<std::uint32_t>(k % spec.num_classes);
        PointCloud pc = gen_shape(cls, spec.points_per_cloud, derive_seed(spec.seed, Stream::data, id),
                                  spec.jitter);
        pc.id = id;
        out.push_back(std::move(pc));
    }
    return out;
}

inline std::string encode_dataset(const std::vector<PointCloud>& clouds) {
    ByteWriter w;
    w.magic(kDatasetMagic);
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(clouds.size()));
    for (const auto& pc : clouds) {
        if (pc.class_id > std::numeric_limits<std::uint16_t>::max()) {
            throw DomainError("class id does not fit the MMPD u16 field");
        }
        w.u64(pc.id);
        w.u16(static_cast<std::uint16_t>(pc.class_id));
        w.u32(static_cast<std::uint32_t>(pc.points.size()));
        for (const auto& p : pc.points) {
            for (double c : p) w.f64(c);
        }
    }
    return w.bytes();
}

inline std::vector<PointCloud> decode_dataset(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(kDatasetMagic);
    r.expect_version(kDatasetVersion);
    const std::uint32_t count = r.u32();
    std::vector<PointCloud> out;
    out.reserve(std::min<std::uint32_t>(count, 1u << 20));
    for (std::uint32_t k = 0; k < count; ++k) {
        PointCloud pc;
        pc.id = r.u64();
        pc.class_id = r.u16();
        const std::uint32_t n = r.u32();
        r.require(static_cast<std::uint64_t>(n) * 24, "point payload");
        pc.points.resize(n);
        for (auto& p : pc.points) {
            for (auto& c : p) c = r.f64();
        }
        out.push_back(std::move(pc));
    }
    r.expect_end();
    return out;
}

inline void save_dataset(const std::vector<PointCloud>& clouds, const std::filesystem::path& path) {
    write_file(path, encode_dataset(clouds));
}

inline std::vector<PointCloud> load_dataset(const std::filesystem::path& path) {
    return decode_dataset(read_file(path));
}

} // namespace mmx
