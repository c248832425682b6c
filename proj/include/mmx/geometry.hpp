#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmx/errors.hpp"
#include "mmx/rng.hpp"

namespace mmx {

using Point3 = std::array<double, 3>;

struct PointCloud {
    std::uint64_t id = 0;
    std::uint32_t class_id = 0;
    std::vector<Point3> points;

    std::size_t size() const noexcept { return points.size(); }
};

/// Built-in parametric surfaces used as synthetic shape categories.
enum class Shape : std::uint32_t {
    sphere = 0,
    cube = 1,
    cylinder = 2,
    cone = 3,
    torus = 4,
    disc = 5,
    dumbbell = 6,
    helix = 7,
};

inline constexpr std::uint32_t kNumShapes = 8;
inline constexpr std::size_t kMinShapePoints = 8;

inline const char* shape_name(std::uint32_t class_id) {
    static constexpr std::array<const char*, kNumShapes> names = {
        "sphere", "cube", "cylinder", "cone", "torus", "disc", "dumbbell", "helix"};
    return class_id < kNumShapes ? names[class_id] : "unknown";
}

inline double squared_distance(const Point3& a, const Point3& b) noexcept {
    const double dx = a[0] - b[0];
    const double dy = a[1] - b[1];
    const double dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

inline double norm(const Point3& p) noexcept {
    return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
}

/// Throws unless the cloud is non-empty with finite coordinates.
inline void validate(const PointCloud& pc) {
    if (pc.points.empty()) {
        throw DomainError("point cloud " + std::to_string(pc.id) + " is empty");
    }
    for (std::size_t k = 0; k < pc.points.size(); ++k) {
        for (double c : pc.points[k]) {
            if (!std::isfinite(c)) {
                throw DomainError("point cloud " + std::to_string(pc.id) +
                                  " has a non-finite coordinate at point " + std::to_string(k));
            }
        }
    }
}

/// Centers the cloud on its centroid and scales so the farthest point has norm 1.
inline PointCloud normalize_unit_sphere(PointCloud pc) {
    validate(pc);
    const Point3 first = pc.points.front();
    bool distinct = false;
    for (const auto& p : pc.points) {
        if (p != first) {
            distinct = true;
            break;
        }
    }
    if (!distinct) {
        throw DegenerateError("point cloud " + std::to_string(pc.id) +
                              " collapses to a single point");
    }

    Point3 centroid{0.0, 0.0, 0.0};
    for (const auto& p : pc.points) {
        for (int a = 0; a < 3; ++a) centroid[a] += p[a];
    }
    const double inv_n = 1.0 / static_cast<double>(pc.points.size());
    for (auto& c : centroid) c *= inv_n;

    double max_norm = 0.0;
    for (auto& p : pc.points) {
        for (int a = 0; a < 3; ++a) p[a] -= centroid[a];
        max_norm = std::max(max_norm, norm(p));
    }
    for (auto& p : pc.points) {
        for (auto& c : p) c /= max_norm;
    }
    return pc;
}

namespace detail {

inline Point3 unit_gaussian_direction(Rng& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (;;) {
        Point3 p{gauss(rng), gauss(rng), gauss(rng)};
        const double r = norm(p);
        if (r > 1e-12) return {p[0] / r, p[1] / r, p[2] / r};
    }
}

inline Point3 sample_surface(Shape shape, Rng& rng) {
    constexpr double pi = std::numbers::pi;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    switch (shape) {
    case Shape::sphere:
        return unit_gaussian_direction(rng);
    case Shape::cube: {
        const auto face = static_cast<int>(std::uniform_int_distribution<int>(0, 5)(rng));
        Point3 p{2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0, 2.0 * unit(rng) - 1.0};
        p[face / 2] = (face % 2 == 0) ? -1.0 : 1.0;
        return p;
    }
    case Shape::cylinder: {
        // radius 0.5, z in [-1, 1]; caps weighted by area
        constexpr double r = 0.5;
        constexpr double lateral = 2.0 * pi * r * 2.0;
        constexpr double caps = 2.0 * pi * r * r;
        const double theta = 2.0 * pi * unit(rng);
        if (unit(rng) * (lateral + caps) < lateral) {
            return {r * std::cos(theta), r * std::sin(theta), 2.0 * unit(rng) - 1.0};
        }
        const double rho = r * std::sqrt(unit(rng));
        const double z = unit(rng) < 0.5 ? -1.0 : 1.0;
        return {rho * std::cos(theta), rho * std::sin(theta), z};
    }
    case Shape::cone: {
        // apex (0,0,1), base radius 1 at z = -1
        const double lateral = pi * std::sqrt(5.0);
        constexpr double base = pi;
        const double theta = 2.0 * pi * unit(rng);
        if (unit(rng) * (lateral + base) < lateral) {
            const double t = std::sqrt(unit(rng));
            return {t * std::cos(theta), t * std::sin(theta), 1.0 - 2.0 * t};
        }
        const double rho = std::sqrt(unit(rng));
        return {rho * std::cos(theta), rho * std::sin(theta), -1.0};
    }
    case Shape::torus: {
        constexpr double big = 1.0;
        constexpr double small = 0.4;
        double phi = 0.0;
        // area element is proportional to (R + r cos(phi))
        do {
            phi = 2.0 * pi * unit(rng);
        } while (unit(rng) * (big + small) > big + small * std::cos(phi));
        const double theta = 2.0 * pi * unit(rng);
        const double ring = big + small * std::cos(phi);
        return {ring * std::cos(theta), ring * std::sin(theta), small * std::sin(phi)};
    }
    case Shape::disc: {
        const double rho = std::sqrt(unit(rng));
        const double theta = 2.0 * pi * unit(rng);
        return {rho * std::cos(theta), rho * std::sin(theta), 0.0};
    }
    case Shape::dumbbell: {
        const double cx = unit(rng) < 0.5 ? -1.0 : 1.0;
        const Point3 d = unit_gaussian_direction(rng);
        return {cx + 0.5 * d[0], 0.5 * d[1], 0.5 * d[2]};
    }
    case Shape::helix: {
        constexpr double pitch = 0.15;
        constexpr double tube = 0.15;
        const double t = 4.0 * pi * unit(rng);
        const double psi = 2.0 * pi * unit(rng);
        const double inv = 1.0 / std::sqrt(1.0 + pitch * pitch);
        const Point3 tangent{-std::sin(t) * inv, std::cos(t) * inv, pitch * inv};
        const Point3 normal{-std::cos(t), -std::sin(t), 0.0};
        const Point3 binormal{tangent[1] * normal[2] - tangent[2] * normal[1],
                              tangent[2] * normal[0] - tangent[0] * normal[2],
                              tangent[0] * normal[1] - tangent[1] * normal[0]};
        const Point3 c{std::cos(t), std::sin(t), pitch * (t - 2.0 * pi)};
        Point3 p{};
        for (int a = 0; a < 3; ++a) {
            p[a] = c[a] + tube * (std::cos(psi) * normal[a] + std::sin(psi) * binormal[a]);
        }
        return p;
    }
    }
    throw DomainError("unknown shape");
}

inline bool centrally_symmetric(Shape shape) noexcept {
    return shape != Shape::cone && shape != Shape::helix;
}

} // namespace detail

/// Samples a normalized synthetic shape. Centrally symmetric surfaces are drawn
/// in antipodal pairs, which keeps their centroid exactly at the origin.
inline PointCloud gen_shape(std::uint32_t class_id, std::size_t n_points, std::uint64_t seed,
                            double jitter_sigma) {
    if (class_id >= kNumShapes) {
        throw DomainError("unknown shape class " + std::to_string(class_id));
    }
    if (n_points < kMinShapePoints) {
        throw DomainError("gen_shape needs at least " + std::to_string(kMinShapePoints) +
                          " points, got " + std::to_string(n_points));
    }
    if (!(jitter_sigma >= 0.0) || !std::isfinite(jitter_sigma)) {
        throw DomainError("jitter_sigma must be finite and non-negative");
    }
    const auto shape = static_cast<Shape>(class_id);
    Rng rng = make_rng(seed, Stream::shape, class_id, n_points);

    PointCloud pc;
    pc.class_id = class_id;
    pc.points.reserve(n_points);
    if (detail::centrally_symmetric(shape)) {
        while (pc.points.size() + 2 <= n_points) {
            const Point3 p = detail::sample_surface(shape, rng);
            pc.points.push_back(p);
            pc.points.push_back({-p[0], -p[1], -p[2]});
        }
    }
    while (pc.points.size() < n_points) {
        pc.points.push_back(detail::sample_surface(shape, rng));
    }

    if (jitter_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, jitter_sigma);
        for (auto& p : pc.points) {
            for (auto& c : p) c += noise(rng);
        }
    }
    return normalize_unit_sphere(std::move(pc));
}

/// Farthest point sampling: greedy max-min Euclidean distance, starting at
/// `start_index`, ties broken by the smallest index.
inline std::vector<std::size_t> fps(std::span<const Point3> points, std::size_t m,
                                    std::size_t start_index) {
    const std::size_t n = points.size();
    if (m == 0 || m > n) {
        throw DomainError("fps: need 1 <= m <= N, got m=" + std::to_string(m) +
                          ", N=" + std::to_string(n));
    }
    if (start_index >= n) {
        throw DomainError("fps: start index " + std::to_string(start_index) + " out of range");
    }
    std::vector<std::size_t> picked;
    picked.reserve(m);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::vector<char> taken(n, 0);

    std::size_t last = start_index;
    picked.push_back(last);
    taken[last] = 1;
    while (picked.size() < m) {
        std::size_t best = n;
        double best_d2 = -1.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (taken[k]) continue;
            min_d2[k] = std::min(min_d2[k], squared_distance(points[k], points[last]));
            if (min_d2[k] > best_d2) {
                best_d2 = min_d2[k];
                best = k;
            }
        }
        last = best;
        picked.push_back(last);
        taken[last] = 1;
    }
    return picked;
}

inline std::vector<Point3> gather(std::span<const Point3> points,
                                  std::span<const std::size_t> indices) {
    std::vector<Point3> out;
    out.reserve(indices.size());
    for (std::size_t k : indices) out.push_back(points[k]);
    return out;
}

} // namespace mmx
