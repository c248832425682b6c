#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "mmx/errors.hpp"
#include "mmx/geometry.hpp"
#include "mmx/linalg.hpp"
#include "mmx/rng.hpp"

namespace mmx {

/// Binary point-ownership mask: s[k] == 1 takes point k from the first cloud.
struct MixMask {
    std::vector<std::uint8_t> s;
    std::size_t n_from_first = 0;

    std::size_t size() const noexcept { return s.size(); }
    double realized_lambda() const noexcept {
        return static_cast<double>(n_from_first) / static_cast<double>(s.size());
    }
};

/// One mixing decision. The same record drives every modality of a sample.
struct MixedPair {
    std::size_t i = 0;
    std::size_t j = 0;
    double lambda = 1.0;
    std::optional<MixMask> mask;
};

/// Input-level mix result; keeps both source labels.
struct MixedCloud {
    std::vector<Point3> points;
    std::uint32_t class_first = 0;
    std::uint32_t class_second = 0;
};

/// floor of the correctly rounded product lambda * n, so 0.7 * 10 gives 7.
inline std::size_t floor_lambda_n(double lambda, std::size_t n) {
    return static_cast<std::size_t>(std::floor(lambda * static_cast<double>(n)));
}

/// One draw from Beta(beta, beta), strictly inside (0, 1).
inline double sample_lambda(double beta, Rng& rng) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw DomainError("beta must be positive and finite");
    }
    std::gamma_distribution<double> gamma(beta, 1.0);
    for (;;) {
        const double x = gamma(rng);
        const double y = gamma(rng);
        const double lambda = x / (x + y);
        if (lambda > 0.0 && lambda < 1.0) return lambda;
    }
}

/// Uniformly random derangement of [0, n) by rejection over shuffles.
inline std::vector<std::size_t> make_pairing(std::size_t n, Rng& rng) {
    if (n < 2) {
        throw DomainError("pairing needs a batch of at least 2");
    }
    std::vector<std::size_t> perm(n);
    for (;;) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        bool fixed_point = false;
        for (std::size_t k = 0; k < n; ++k) {
            if (perm[k] == k) {
                fixed_point = true;
                break;
            }
        }
        if (!fixed_point) return perm;
    }
}

/// Mask with exactly floor(lambda * N) ones at uniformly random positions.
inline MixMask build_mask(std::size_t n_points, double lambda, Rng& rng) {
    if (n_points == 0) {
        throw DomainError("mask needs at least one point");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw DomainError("lambda must lie in [0, 1]");
    }
    const std::size_t ones = floor_lambda_n(lambda, n_points);
    std::vector<std::size_t> order(n_points);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    MixMask mask;
    mask.s.assign(n_points, 0);
    for (std::size_t k = 0; k < ones; ++k) mask.s[order[k]] = 1;
    mask.n_from_first = ones;
    return mask;
}

/// M = S * P1 + (1 - S) * P2, pointwise. No renormalization.
inline MixedCloud input_mix(const PointCloud& p1, const PointCloud& p2, const MixMask& mask) {
    if (p1.size() != mask.size() || p2.size() != mask.size()) {
        throw DomainError("input_mix: clouds have " + std::to_string(p1.size()) + " and " +
                          std::to_string(p2.size()) + " points, mask has " +
                          std::to_string(mask.size()));
    }
    MixedCloud out;
    out.class_first = p1.class_id;
    out.class_second = p2.class_id;
    out.points.reserve(mask.size());
    for (std::size_t k = 0; k < mask.size(); ++k) {
        out.points.push_back(mask.s[k] ? p1.points[k] : p2.points[k]);
    }
    return out;
}

namespace detail {

template <class T>
void check_mix_args(const Vec<T>& fi, const Vec<T>& fj, T lambda) {
    if (fi.size() != fj.size()) {
        throw ShapeError("feature_mix: dimension mismatch " + std::to_string(fi.size()) + " vs " +
                         std::to_string(fj.size()));
    }
    if (!(lambda >= T(0) && lambda <= T(1))) {
        throw DomainError("feature_mix: lambda must lie in [0, 1]");
    }
    if (!fi.allFinite() || !fj.allFinite()) {
        throw DomainError("feature_mix: non-finite feature entry");
    }
}

} // namespace detail

/// m = lambda * fi + (1 - lambda) * fj, optionally scaled to unit L2 norm.
template <class T>
Vec<T> feature_mix(const Vec<T>& fi, const Vec<T>& fj, T lambda, bool renormalize) {
    detail::check_mix_args(fi, fj, lambda);
    Vec<T> m = lambda * fi + (T(1) - lambda) * fj;
    if (renormalize) {
        const T len = m.norm();
        if (!(len > T(0))) {
            throw DegenerateError("feature_mix: mixed feature has zero norm");
        }
        m /= len;
    }
    return m;
}

/// Vector-Jacobian product of feature_mix: returns (dL/dfi, dL/dfj).
template <class T>
std::pair<Vec<T>, Vec<T>> feature_mix_backward(const Vec<T>& fi, const Vec<T>& fj, T lambda,
                                                bool renormalize, const Vec<T>& upstream) {
    detail::check_mix_args(fi, fj, lambda);
    Vec<T> du = upstream;
    if (renormalize) {
        const Vec<T> u = lambda * fi + (T(1) - lambda) * fj;
        const T len = u.norm();
        if (!(len > T(0))) {
            throw DegenerateError("feature_mix: mixed feature has zero norm");
        }
        const Vec<T> m = u / len;
        du = (upstream - m * m.dot(upstream)) / len;
    }
    return {lambda * du, (T(1) - lambda) * du};
}

} // namespace mmx
