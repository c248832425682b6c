#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmx/binary_io.hpp"
#include "mmx/errors.hpp"
#include "mmx/geometry.hpp"
#include "mmx/linalg.hpp"
#include "mmx/rng.hpp"

namespace mmx {

/// Stand-in for frozen text/image towers: one shared unit anchor per class.
/// Text embeds to the anchor itself, images to a seeded noisy copy of it.
struct SyntheticModalityModel {
    std::size_t dim = 0;
    std::uint32_t num_classes = 0;
    MatD anchors;  // num_classes x dim, unit rows
    double sigma_image = 0.0;
    std::uint64_t master_seed = 0;
};

inline constexpr double kMaxAnchorDot = 0.5;
inline constexpr int kAnchorRetries = 100;

inline double max_offdiagonal_dot(const MatD& anchors) {
    double worst = -1.0;
    for (Eigen::Index a = 0; a < anchors.rows(); ++a) {
        for (Eigen::Index b = a + 1; b < anchors.rows(); ++b) {
            worst = std::max(worst, anchors.row(a).dot(anchors.row(b)));
        }
    }
    return worst;
}

inline SyntheticModalityModel build_model(std::uint64_t master_seed, std::uint32_t num_classes,
                                          std::size_t dim, double sigma_image) {
    if (dim < 8) throw DomainError("embedding dim must be >= 8");
    if (num_classes < 2) throw DomainError("need at least 2 classes");
    if (!(sigma_image >= 0.0) || !std::isfinite(sigma_image)) {
        throw DomainError("sigma_image must be finite and non-negative");
    }

    SyntheticModalityModel model;
    model.dim = dim;
    model.num_classes = num_classes;
    model.sigma_image = sigma_image;
    model.master_seed = master_seed;
    model.anchors.resize(num_classes, static_cast<Eigen::Index>(dim));

    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int attempt = 0; attempt < kAnchorRetries; ++attempt) {
        Rng rng = make_rng(master_seed, Stream::frozen, static_cast<std::uint64_t>(attempt));
        for (Eigen::Index c = 0; c < model.anchors.rows(); ++c) {
            for (Eigen::Index k = 0; k < model.anchors.cols(); ++k) model.anchors(c, k) = gauss(rng);
            model.anchors.row(c) /= model.anchors.row(c).norm();
        }
        if (max_offdiagonal_dot(model.anchors) <= kMaxAnchorDot) return model;
    }
    throw DomainError("could not draw " + std::to_string(num_classes) +
                      " anchors with pairwise dot <= 0.5 in dim " + std::to_string(dim) +
                      " after " + std::to_string(kAnchorRetries) + " attempts");
}

inline void check_class(const SyntheticModalityModel& model, std::uint32_t class_id) {
    if (class_id >= model.num_classes) {
        throw DomainError("class " + std::to_string(class_id) + " out of range [0, " +
                          std::to_string(model.num_classes) + ")");
    }
}

inline VecD embed_text(const SyntheticModalityModel& model, std::uint32_t class_id) {
    check_class(model, class_id);
    return model.anchors.row(class_id).transpose();
}

inline VecD embed_image(const SyntheticModalityModel& model, std::uint32_t class_id,
                        std::uint64_t instance_seed) {
    check_class(model, class_id);
    VecD v = model.anchors.row(class_id).transpose();
    if (model.sigma_image > 0.0) {
        Rng rng = make_rng(model.master_seed, Stream::image, class_id, instance_seed);
        std::normal_distribution<double> gauss(0.0, model.sigma_image);
        for (Eigen::Index k = 0; k < v.size(); ++k) v[k] += gauss(rng);
    }
    return v / v.norm();
}

enum class Modality : std::uint8_t { text = 0, image = 1, point = 2 };

inline const char* modality_name(Modality m) {
    switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::point: return "point";
    }
    return "unknown";
}

inline Modality parse_modality(std::string_view s) {
    if (s == "text") return Modality::text;
    if (s == "image") return Modality::image;
    if (s == "point") return Modality::point;
    throw DomainError("unknown modality '" + std::string(s) + "' (expected text, image or point)");
}

struct EmbeddingCache {
    Modality modality = Modality::text;
    std::size_t dim = 0;
    std::map<std::uint64_t, VecD> entries;  // ascending id order is the on-disk order

    const VecD& at(std::uint64_t id) const {
        auto it = entries.find(id);
        if (it == entries.end()) {
            throw CacheError(std::string(modality_name(modality)) + " cache has no entry for id " +
                             std::to_string(id));
        }
        return it->second;
    }

    bool operator==(const EmbeddingCache&) const = default;
};

struct SampleRef {
    std::uint64_t id = 0;
    std::uint32_t class_id = 0;
};

inline std::vector<SampleRef> sample_refs(std::span<const PointCloud> clouds) {
    std::vector<SampleRef> refs;
    refs.reserve(clouds.size());
    for (const auto& pc : clouds) refs.push_back({pc.id, pc.class_id});
    return refs;
}

/// Embeds every sample once. Text ignores `instance_seeds`; image uses seed k for sample k.
inline EmbeddingCache precache(std::span<const SampleRef> samples, const SyntheticModalityModel& model,
                               Modality modality, std::span<const std::uint64_t> instance_seeds) {
    if (modality == Modality::point) {
        throw DomainError("point embeddings come from a trained encoder, not the frozen model");
    }
    if (modality == Modality::image && instance_seeds.size() != samples.size()) {
        throw DomainError("image precache needs one instance seed per sample");
    }
    EmbeddingCache cache;
    cache.modality = modality;
    cache.dim = model.dim;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto& s = samples[k];
        VecD v = modality == Modality::text ? embed_text(model, s.class_id)
                                            : embed_image(model, s.class_id, instance_seeds[k]);
        if (!cache.entries.emplace(s.id, std::move(v)).second) {
            throw CacheError("duplicate sample id " + std::to_string(s.id));
        }
    }
    return cache;
}

/// Image instances seeded by sample id, so a sample embeds the same way in any split.
inline EmbeddingCache precache(std::span<const SampleRef> samples, const SyntheticModalityModel& model,
                               Modality modality) {
    std::vector<std::uint64_t> seeds;
    seeds.reserve(samples.size());
    for (const auto& s : samples) seeds.push_back(s.id);
    return precache(samples, model, modality, seeds);
}

inline constexpr std::string_view kCacheMagic = "MMEC";
inline constexpr std::uint16_t kCacheVersion = 1;
inline constexpr double kCacheUnitTolerance = 1e-6;

inline std::string encode_cache(const EmbeddingCache& cache) {
    ByteWriter w;
    w.magic(kCacheMagic);
    w.u16(kCacheVersion);
    w.u8(static_cast<std::uint8_t>(cache.modality));
    w.u32(static_cast<std::uint32_t>(cache.entries.size()));
    w.u32(static_cast<std::uint32_t>(cache.dim));
    for (const auto& [id, v] : cache.entries) {
        if (static_cast<std::size_t>(v.size()) != cache.dim) {
            throw ShapeError("cache entry " + std::to_string(id) + " has wrong dimension");
        }
        w.u64(id);
        for (Eigen::Index k = 0; k < v.size(); ++k) w.f64(v[k]);
    }
    return w.bytes();
}

inline EmbeddingCache decode_cache(std::string_view bytes) {
    ByteReader r(bytes);
    r.expect_magic(kCacheMagic);
    r.expect_version(kCacheVersion);
    const auto modality_at = r.offset();
    const std::uint8_t modality = r.u8();
    if (modality > 2) {
        throw FormatError(modality_at, "unknown modality code " + std::to_string(modality));
    }
    EmbeddingCache cache;
    cache.modality = static_cast<Modality>(modality);
    const std::uint32_t count = r.u32();
    cache.dim = r.u32();
    bool have_prev = false;
    std::uint64_t prev = 0;
    for (std::uint32_t n = 0; n < count; ++n) {
        const auto record_at = r.offset();
        const std::uint64_t id = r.u64();
        if (have_prev && id <= prev) {
            throw FormatError(record_at, "ids not strictly ascending (" + std::to_string(id) +
                                             " after " + std::to_string(prev) + ")");
        }
        r.require(cache.dim * 8, "embedding payload");
        VecD v(static_cast<Eigen::Index>(cache.dim));
        for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = r.f64();
        const double len = v.norm();
        if (!(std::abs(len - 1.0) <= kCacheUnitTolerance)) {
            throw FormatError(record_at, "unit-norm violation for id " + std::to_string(id) +
                                             " (norm " + std::to_string(len) + ")");
        }
        cache.entries.emplace(id, std::move(v));
        prev = id;
        have_prev = true;
    }
    r.expect_end();
    return cache;
}

inline void save_cache(const EmbeddingCache& cache, const std::filesystem::path& path) {
    write_file(path, encode_cache(cache));
}

inline EmbeddingCache load_cache(const std::filesystem::path& path) {
    return decode_cache(read_file(path));
}

} // namespace mmx
