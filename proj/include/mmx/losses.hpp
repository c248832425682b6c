#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmx/errors.hpp"
#include "mmx/linalg.hpp"

namespace mmx {

/// Learnable softmax temperature stored as a log-parameter. rho is kept inside
/// [log tau_min, log tau_max] by clamp(), which the trainer calls after every step.
struct Temperature {
    double rho = std::log(0.07);
    double tau_min = 0.01;
    double tau_max = 100.0;

    static Temperature from_tau(double tau, double tau_min = 0.01, double tau_max = 100.0) {
        if (!(tau_min > 0.0) || !(tau_min <= tau_max)) {
            throw DomainError("temperature bounds must satisfy 0 < tau_min <= tau_max");
        }
        Temperature t{std::log(tau), tau_min, tau_max};
        t.clamp();
        return t;
    }

    double tau() const { return std::clamp(std::exp(rho), tau_min, tau_max); }

    void clamp() { rho = std::clamp(rho, std::log(tau_min), std::log(tau_max)); }
};

/// Which cross-modal targets take part in a stage loss.
struct LossTerms {
    bool text = true;
    bool image = true;
    bool point = true;

    bool operator==(const LossTerms&) const = default;
};

inline LossTerms parse_loss_terms(std::string_view list) {
    LossTerms terms{false, false, false};
    std::size_t pos = 0;
    while (pos <= list.size()) {
        const auto comma = std::min(list.find(',', pos), list.size());
        std::string item(list.substr(pos, comma - pos));
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item == "text") terms.text = true;
        else if (item == "image") terms.image = true;
        else if (item == "point") terms.point = true;
        else throw DomainError("unknown loss term '" + item + "'");
        pos = comma + 1;
    }
    if (!terms.text && !terms.image && !terms.point) {
        throw DomainError("loss terms must not be empty");
    }
    return terms;
}

inline std::string to_string(const LossTerms& t) {
    std::string s;
    auto add = [&s](const char* name) {
        if (!s.empty()) s += ",";
        s += name;
    };
    if (t.text) add("text");
    if (t.image) add("image");
    if (t.point) add("point");
    return s;
}

enum class LossStage { one = 1, two = 2 };

/// Per-modality feature rows for one batch. `mM` is only used in stage two.
template <class T>
struct BatchFeaturesT {
    Mat<T> mP;
    Mat<T> mI;
    Mat<T> mT;
    Mat<T> mM;
};

using BatchFeatures = BatchFeaturesT<double>;

/// S(i, k) = <X_i, Y_k>.
template <class T>
Mat<T> similarity_matrix(const Mat<T>& X, const Mat<T>& Y) {
    if (X.rows() != Y.rows() || X.cols() != Y.cols()) {
        throw ShapeError("similarity_matrix: shapes " + std::to_string(X.rows()) + "x" +
                         std::to_string(X.cols()) + " and " + std::to_string(Y.rows()) + "x" +
                         std::to_string(Y.cols()) + " differ");
    }
    return X * Y.transpose();
}

namespace detail {

template <class T>
void require_finite(const Mat<T>& S) {
    if (!S.allFinite()) throw DomainError("contrastive loss: non-finite similarity");
}

} // namespace detail

/// Mean over rows i of -log softmax_k(S(i, k) / tau) at k = i (log-sum-exp shifted).
template <class T>
T info_nce_dir(const Mat<T>& S, T tau) {
    if (S.rows() != S.cols()) throw ShapeError("info_nce_dir: similarity matrix must be square");
    if (!(tau > T(0))) throw DomainError("info_nce_dir: tau must be positive");
    detail::require_finite(S);
    using std::exp;
    using std::log;
    const Eigen::Index n = S.rows();
    T total(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        T shift = S(i, 0) / tau;
        for (Eigen::Index k = 1; k < n; ++k) shift = std::max(shift, S(i, k) / tau);
        T sum(0);
        for (Eigen::Index k = 0; k < n; ++k) sum += exp(S(i, k) / tau - shift);
        total += shift + log(sum) - S(i, i) / tau;
    }
    return total / T(n);
}

/// Row-independent denominator sum_j exp(S(j, j) / tau), kept for inspection only.
template <class T>
T info_nce_literal(const Mat<T>& S, T tau) {
    if (S.rows() != S.cols()) throw ShapeError("info_nce_literal: similarity matrix must be square");
    if (!(tau > T(0))) throw DomainError("info_nce_literal: tau must be positive");
    detail::require_finite(S);
    using std::exp;
    using std::log;
    const Eigen::Index n = S.rows();
    T shift = S(0, 0) / tau;
    for (Eigen::Index j = 1; j < n; ++j) shift = std::max(shift, S(j, j) / tau);
    T sum(0);
    T diag_mean(0);
    for (Eigen::Index j = 0; j < n; ++j) {
        sum += exp(S(j, j) / tau - shift);
        diag_mean += S(j, j) / tau;
    }
    return shift + log(sum) - diag_mean / T(n);
}

namespace detail {

/// The (anchor, target) modality pairs a stage sums over; each contributes both directions.
template <class T>
std::vector<std::pair<const Mat<T>*, const Mat<T>*>> loss_pairs(const BatchFeaturesT<T>& b,
                                                                LossStage stage,
                                                                const LossTerms& terms) {
    std::vector<std::pair<const Mat<T>*, const Mat<T>*>> pairs;
    const Mat<T>* anchor = stage == LossStage::one ? &b.mP : &b.mM;
    if (terms.image) pairs.emplace_back(anchor, &b.mI);
    if (terms.text) pairs.emplace_back(anchor, &b.mT);
    if (stage == LossStage::two && terms.point) pairs.emplace_back(anchor, &b.mP);
    if (pairs.empty()) {
        throw DomainError("no enabled loss term applies to this stage");
    }
    return pairs;
}

} // namespace detail

/// Mean of the enabled directional terms: all four (P<->I, P<->T) in stage one,
/// all six (M<->I, M<->T, M<->P) in stage two.
template <class T>
T stage_loss(const BatchFeaturesT<T>& b, T tau, LossStage stage, const LossTerms& terms = {},
             bool literal = false) {
    const auto pairs = detail::loss_pairs(b, stage, terms);
    T total(0);
    for (const auto& [x, y] : pairs) {
        const Mat<T> S = similarity_matrix(*x, *y);
        if (literal) {
            total += T(2) * info_nce_literal(S, tau);
        } else {
            total += info_nce_dir(S, tau);
            total += info_nce_dir(Mat<T>(S.transpose()), tau);
        }
    }
    return total / T(2 * pairs.size());
}

template <class T>
T loss_stage1(const Mat<T>& mP, const Mat<T>& mI, const Mat<T>& mT, T tau,
              const LossTerms& terms = {}) {
    return stage_loss(BatchFeaturesT<T>{mP, mI, mT, {}}, tau, LossStage::one, terms);
}

template <class T>
T loss_stage2(const Mat<T>& mM, const Mat<T>& mP, const Mat<T>& mI, const Mat<T>& mT, T tau,
              const LossTerms& terms = {}) {
    return stage_loss(BatchFeaturesT<T>{mP, mI, mT, mM}, tau, LossStage::two, terms);
}

struct LossGradients {
    double value = 0.0;
    MatD dP;
    MatD dI;
    MatD dT;
    MatD dM;
    double drho = 0.0;  // through tau = exp(rho)
};

/// Exact gradients of stage_loss with respect to every feature row and rho.
/// Rows of modalities that take no part in the loss get zero gradients.
inline LossGradients loss_backward(const BatchFeatures& b, double tau, LossStage stage,
                                   const LossTerms& terms = {}, bool literal = false) {
    const auto pairs = detail::loss_pairs(b, stage, terms);
    LossGradients g;
    auto zero_like = [](const MatD& m) { return MatD::Zero(m.rows(), m.cols()); };
    g.dP = zero_like(b.mP);
    g.dI = zero_like(b.mI);
    g.dT = zero_like(b.mT);
    g.dM = zero_like(b.mM);
    auto grad_of = [&](const MatD* m) -> MatD& {
        if (m == &b.mP) return g.dP;
        if (m == &b.mI) return g.dI;
        if (m == &b.mT) return g.dT;
        return g.dM;
    };

    const double weight = 1.0 / static_cast<double>(2 * pairs.size());
    double dtau = 0.0;
    for (const auto& [x, y] : pairs) {
        const MatD S = similarity_matrix(*x, *y);
        const Eigen::Index n = S.rows();
        MatD G = MatD::Zero(n, n);  // dL/dS
        if (literal) {
            g.value += weight * 2.0 * info_nce_literal(S, tau);
            const Eigen::VectorXd diag = S.diagonal() / tau;
            const Eigen::VectorXd q = (diag.array() - diag.maxCoeff()).exp();
            const Eigen::VectorXd soft = q / q.sum();
            for (Eigen::Index j = 0; j < n; ++j) {
                G(j, j) = weight * 2.0 * (soft[j] - 1.0 / static_cast<double>(n)) / tau;
            }
        } else {
            g.value += weight * (info_nce_dir(S, tau) + info_nce_dir(MatD(S.transpose()), tau));
            const MatD logits = S / tau;
            const double scale = weight / (static_cast<double>(n) * tau);
            // row direction: softmax over k for each row i
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::RowVectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
                G.row(i) += scale * e / e.sum();
                G(i, i) -= scale;
            }
            // column direction: softmax over i for each column k
            for (Eigen::Index k = 0; k < n; ++k) {
                const Eigen::VectorXd e = (logits.col(k).array() - logits.col(k).maxCoeff()).exp();
                G.col(k) += scale * e / e.sum();
                G(k, k) -= scale;
            }
        }
        grad_of(x) += G * (*y);
        grad_of(y) += G.transpose() * (*x);
        dtau -= (G.array() * S.array()).sum() / tau;
    }
    g.drho = dtau * tau;
    return g;
}

} // namespace mmx
