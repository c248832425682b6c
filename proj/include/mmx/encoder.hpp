#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmx/errors.hpp"
#include "mmx/geometry.hpp"
#include "mmx/linalg.hpp"
#include "mmx/rng.hpp"

namespace mmx {

/// Weights of the point encoder: per-point MLP 3 -> h -> h, channelwise max
/// pool, linear head h -> d, then L2 normalization.
template <class T>
struct EncoderParamsT {
    Mat<T> W1;  // h x 3
    Vec<T> b1;  // h
    Mat<T> W2;  // h x h
    Vec<T> b2;  // h
    Mat<T> W3;  // d x h
    Vec<T> b3;  // d

    std::size_t hidden() const noexcept { return static_cast<std::size_t>(W1.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(W3.rows()); }

    template <class U>
    EncoderParamsT<U> cast() const {
        return {W1.template cast<U>(), b1.template cast<U>(), W2.template cast<U>(),
                b2.template cast<U>(), W3.template cast<U>(), b3.template cast<U>()};
    }

    static EncoderParamsT zeros(std::size_t h, std::size_t d) {
        const auto H = static_cast<Eigen::Index>(h);
        const auto D = static_cast<Eigen::Index>(d);
        return {Mat<T>::Zero(H, 3), Vec<T>::Zero(H), Mat<T>::Zero(H, H),
                Vec<T>::Zero(H),    Mat<T>::Zero(D, H), Vec<T>::Zero(D)};
    }

    bool operator==(const EncoderParamsT& o) const {
        return W1 == o.W1 && b1 == o.b1 && W2 == o.W2 && b2 == o.b2 && W3 == o.W3 && b3 == o.b3;
    }
};

using EncoderParams = EncoderParamsT<double>;

inline constexpr std::array<const char*, 6> kEncoderTensorNames = {"W1", "b1", "W2",
                                                                   "b2", "W3", "b3"};

/// Flat views of the six tensors, in checkpoint order. Matrices are row-major.
template <class T>
std::array<std::span<T>, 6> tensors(EncoderParamsT<T>& p) {
    auto view = [](auto& m) { return std::span<T>(m.data(), static_cast<std::size_t>(m.size())); };
    return {view(p.W1), view(p.b1), view(p.W2), view(p.b2), view(p.W3), view(p.b3)};
}

template <class T>
std::array<std::span<const T>, 6> tensors(const EncoderParamsT<T>& p) {
    auto view = [](const auto& m) {
        return std::span<const T>(m.data(), static_cast<std::size_t>(m.size()));
    };
    return {view(p.W1), view(p.b1), view(p.W2), view(p.b2), view(p.W3), view(p.b3)};
}

template <class T>
std::size_t parameter_count(const EncoderParamsT<T>& p) {
    std::size_t n = 0;
    for (auto t : tensors(p)) n += t.size();
    return n;
}

/// He-normal weights, zero biases.
inline EncoderParams init_params(std::uint64_t seed, std::size_t h, std::size_t d) {
    if (h < 4 || d < 4) {
        throw DomainError("encoder needs hidden >= 4 and dim >= 4");
    }
    auto p = EncoderParams::zeros(h, d);
    Rng rng = make_rng(seed, Stream::init, h, d);
    auto fill = [&rng](MatD& m, double fan_in) {
        std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / fan_in));
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = gauss(rng);
    };
    fill(p.W1, 3.0);
    fill(p.W2, static_cast<double>(h));
    fill(p.W3, static_cast<double>(h));
    return p;
}

/// Everything backward() needs; columns are points.
template <class T>
struct ForwardTape {
    using Cols = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    Cols X;   // 3 x N input
    Cols Z1;  // h x N
    Cols A1;
    Cols Z2;
    Cols A2;
    std::vector<Eigen::Index> winners;  // per channel, point index of the max
    Vec<T> pooled;                      // h
    Vec<T> y;                           // d, before normalization
    T y_norm{};
};

template <class T>
struct EncoderOutput {
    Vec<T> feature;
    ForwardTape<T> tape;
};

inline constexpr double kMinFeatureNorm = 1e-12;

template <class T>
EncoderOutput<T> forward(std::span<const Point3> points, const EncoderParamsT<T>& p) {
    const auto n = static_cast<Eigen::Index>(points.size());
    if (n == 0) throw DomainError("encoder input is empty");
    if (p.W1.cols() != 3 || p.W2.rows() != p.W1.rows() || p.W2.cols() != p.W1.rows() ||
        p.W3.cols() != p.W1.rows() || p.b1.size() != p.W1.rows() || p.b2.size() != p.W2.rows() ||
        p.b3.size() != p.W3.rows()) {
        throw ShapeError("encoder parameters have inconsistent shapes");
    }

    EncoderOutput<T> out;
    auto& tape = out.tape;
    tape.X.resize(3, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        for (Eigen::Index a = 0; a < 3; ++a) tape.X(a, k) = T(points[static_cast<std::size_t>(k)][a]);
    }
    tape.Z1.noalias() = p.W1 * tape.X;
    tape.Z1.colwise() += p.b1;
    tape.A1 = tape.Z1.cwiseMax(T(0));
    tape.Z2.noalias() = p.W2 * tape.A1;
    tape.Z2.colwise() += p.b2;
    tape.A2 = tape.Z2.cwiseMax(T(0));

    const Eigen::Index h = tape.A2.rows();
    tape.winners.assign(static_cast<std::size_t>(h), 0);
    tape.pooled.resize(h);
    for (Eigen::Index c = 0; c < h; ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < n; ++k) {
            if (tape.A2(c, k) > tape.A2(c, best)) best = k;
        }
        tape.winners[static_cast<std::size_t>(c)] = best;
        tape.pooled[c] = tape.A2(c, best);
    }

    tape.y.noalias() = p.W3 * tape.pooled;
    tape.y += p.b3;
    tape.y_norm = tape.y.norm();
    if (!(tape.y_norm > T(kMinFeatureNorm))) {
        throw DegenerateError("encoder output has (near) zero norm; network is dead");
    }
    out.feature = tape.y / tape.y_norm;
    return out;
}

template <class T>
Vec<T> encode(std::span<const Point3> points, const EncoderParamsT<T>& p) {
    return forward(points, p).feature;
}

template <class T>
struct EncoderGrads {
    EncoderParamsT<T> params;
    std::optional<Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor>> input;  // N x 3
};

/// Reverse pass for a scalar loss L given dL/dfeature.
template <class T>
EncoderGrads<T> backward(const ForwardTape<T>& tape, const EncoderParamsT<T>& p,
                         const Vec<T>& upstream, bool want_input_grads = false) {
    const Eigen::Index h = p.W1.rows();
    const Eigen::Index d = p.W3.rows();
    const Eigen::Index n = tape.X.cols();
    if (tape.Z1.rows() != h || tape.Z2.rows() != h || tape.y.size() != d ||
        upstream.size() != d || static_cast<Eigen::Index>(tape.winners.size()) != h) {
        throw ShapeError("backward: tape does not match encoder parameters");
    }

    EncoderGrads<T> g{EncoderParamsT<T>::zeros(static_cast<std::size_t>(h), static_cast<std::size_t>(d)),
                      std::nullopt};
    const Vec<T> feature = tape.y / tape.y_norm;
    const Vec<T> dy = (upstream - feature * feature.dot(upstream)) / tape.y_norm;
    g.params.b3 = dy;
    g.params.W3.noalias() = dy * tape.pooled.transpose();
    const Vec<T> dpooled = p.W3.transpose() * dy;

    // Max pool routes each channel's gradient to its recorded winner only.
    typename ForwardTape<T>::Cols dA1 = ForwardTape<T>::Cols::Zero(h, n);
    for (Eigen::Index c = 0; c < h; ++c) {
        const Eigen::Index k = tape.winners[static_cast<std::size_t>(c)];
        if (!(tape.Z2(c, k) > T(0))) continue;
        const T dz = dpooled[c];
        g.params.b2[c] = dz;
        g.params.W2.row(c) = dz * tape.A1.col(k).transpose();
        dA1.col(k) += dz * p.W2.row(c).transpose();
    }
    const typename ForwardTape<T>::Cols dZ1 =
        dA1.cwiseProduct((tape.Z1.array() > T(0)).matrix().template cast<T>());
    g.params.W1.noalias() = dZ1 * tape.X.transpose();
    g.params.b1 = dZ1.rowwise().sum();
    if (want_input_grads) {
        g.input = (p.W1.transpose() * dZ1).transpose();
    }
    return g;
}

/// acc += other, tensor by tensor.
template <class T>
void accumulate(EncoderParamsT<T>& acc, const EncoderParamsT<T>& other) {
    acc.W1 += other.W1;
    acc.b1 += other.b1;
    acc.W2 += other.W2;
    acc.b2 += other.b2;
    acc.W3 += other.W3;
    acc.b3 += other.b3;
}

} // namespace mmx
