#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mmx/encoder.hpp"
#include "mmx/losses.hpp"
#include "mmx/mixing.hpp"
#include "mmx/parallel.hpp"

namespace mmx {

/// One mixing application to one modality, as written to the pairs log.
struct PairRecord {
    std::uint64_t step = 0;
    std::size_t i = 0;
    std::size_t j = 0;
    double lambda = 1.0;
    std::optional<std::size_t> n_from_first;
    std::optional<std::size_t> n_points;
    char modality = 'P';  // M (mixed cloud), P, I, T
};

struct ObjectiveOptions {
    LossTerms terms{};
    bool renormalize = true;
    bool literal = false;
    unsigned threads = 1;
};

/// Rows mixed per pair: out(k) = feature_mix(F(i_k), F(j_k), lambda_k). No pairs
/// means the unmixed (lambda = 1) path and F is returned unchanged.
template <class T>
Mat<T> mix_rows(const Mat<T>& F, std::span<const MixedPair> pairs, bool renormalize,
                std::vector<PairRecord>* log = nullptr, char modality = 'P',
                std::uint64_t step = 0) {
    if (pairs.empty()) return F;
    if (static_cast<Eigen::Index>(pairs.size()) != F.rows()) {
        throw ShapeError("mix_rows: one pair per row required");
    }
    Mat<T> out(F.rows(), F.cols());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        const Vec<T> fi = F.row(static_cast<Eigen::Index>(p.i)).transpose();
        const Vec<T> fj = F.row(static_cast<Eigen::Index>(p.j)).transpose();
        out.row(static_cast<Eigen::Index>(k)) =
            feature_mix<T>(fi, fj, T(p.lambda), renormalize).transpose();
        if (log) {
            PairRecord r{step, p.i, p.j, p.lambda, std::nullopt, std::nullopt, modality};
            if (p.mask) {
                r.n_from_first = p.mask->n_from_first;
                r.n_points = p.mask->size();
            }
            log->push_back(r);
        }
    }
    return out;
}

inline MatD mix_rows_backward(const MatD& F, std::span<const MixedPair> pairs, bool renormalize,
                              const MatD& upstream) {
    if (pairs.empty()) return upstream;
    MatD dF = MatD::Zero(F.rows(), F.cols());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        const auto i = static_cast<Eigen::Index>(p.i);
        const auto j = static_cast<Eigen::Index>(p.j);
        auto [dfi, dfj] = feature_mix_backward<double>(F.row(i).transpose(), F.row(j).transpose(),
                                                       p.lambda, renormalize,
                                                       upstream.row(static_cast<Eigen::Index>(k)).transpose());
        dF.row(i) += dfi.transpose();
        dF.row(j) += dfj.transpose();
    }
    return dF;
}

using CloudView = std::span<const Point3>;

template <class T>
Mat<T> encode_batch(std::span<const CloudView> clouds, const EncoderParamsT<T>& theta,
                    unsigned threads = 1) {
    Mat<T> F(static_cast<Eigen::Index>(clouds.size()), static_cast<Eigen::Index>(theta.dim()));
    std::vector<Vec<T>> rows(clouds.size());
    parallel_for(clouds.size(), threads, [&](std::size_t k) { rows[k] = encode(clouds[k], theta); });
    for (std::size_t k = 0; k < rows.size(); ++k) F.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
    return F;
}

struct TapedBatch {
    MatD features;
    std::vector<ForwardTape<double>> tapes;
};

inline TapedBatch encode_batch_taped(std::span<const CloudView> clouds, const EncoderParams& theta,
                                     unsigned threads) {
    std::vector<EncoderOutput<double>> outs(clouds.size());
    parallel_for(clouds.size(), threads, [&](std::size_t k) { outs[k] = forward(clouds[k], theta); });
    TapedBatch b;
    b.features.resize(static_cast<Eigen::Index>(clouds.size()), static_cast<Eigen::Index>(theta.dim()));
    b.tapes.reserve(outs.size());
    for (std::size_t k = 0; k < outs.size(); ++k) {
        b.features.row(static_cast<Eigen::Index>(k)) = outs[k].feature.transpose();
        b.tapes.push_back(std::move(outs[k].tape));
    }
    return b;
}

/// Sum of per-sample parameter gradients, accumulated in ascending sample order.
inline EncoderParams backward_batch(const TapedBatch& batch, const EncoderParams& theta,
                                    const MatD& dF, unsigned threads) {
    std::vector<EncoderParams> per(batch.tapes.size());
    parallel_for(batch.tapes.size(), threads, [&](std::size_t k) {
        per[k] = backward(batch.tapes[k], theta,
                          VecD(dF.row(static_cast<Eigen::Index>(k)).transpose()))
                     .params;
    });
    auto total = EncoderParams::zeros(theta.hidden(), theta.dim());
    for (const auto& g : per) accumulate(total, g);
    return total;
}

/// Stage-one batch: source clouds, their cached frozen embeddings and the
/// feature-level pairing (empty = no mixing).
struct Stage1Batch {
    std::vector<CloudView> clouds;
    MatD image;
    MatD text;
    std::vector<MixedPair> pairs;
};

/// Stage-two batch: mixed clouds for the new encoder plus already mixed targets.
struct Stage2Batch {
    std::vector<CloudView> mixed;
    MatD target_point;
    MatD target_image;
    MatD target_text;
};

/// One-stage batch: both encoders trained together, stage-two point targets
/// come from the live stage-one encoder.
struct JointBatch {
    Stage1Batch first;
    std::vector<CloudView> mixed;
    std::vector<MixedPair> pairs;  // input-level pairs, lambda = realized lambda
};

inline double tau_of(double rho, const Temperature& bounds) {
    Temperature t = bounds;
    t.rho = rho;
    return t.tau();
}

template <class T>
T tau_of(T rho, const Temperature& bounds) {
    using std::exp;
    return std::clamp(exp(rho), T(bounds.tau_min), T(bounds.tau_max));
}

template <class T>
T stage1_objective(const EncoderParamsT<T>& theta, T rho, const Stage1Batch& b,
                   const Temperature& bounds, const ObjectiveOptions& opt) {
    const Mat<T> F = encode_batch<T>(b.clouds, theta);
    BatchFeaturesT<T> feats{mix_rows<T>(F, b.pairs, opt.renormalize),
                            mix_rows<T>(b.image.cast<T>(), b.pairs, opt.renormalize),
                            mix_rows<T>(b.text.cast<T>(), b.pairs, opt.renormalize),
                            {}};
    return stage_loss(feats, tau_of(rho, bounds), LossStage::one, opt.terms, opt.literal);
}

template <class T>
T stage2_objective(const EncoderParamsT<T>& theta, T rho, const Stage2Batch& b,
                   const Temperature& bounds, const ObjectiveOptions& opt) {
    BatchFeaturesT<T> feats{b.target_point.cast<T>(), b.target_image.cast<T>(),
                            b.target_text.cast<T>(), encode_batch<T>(b.mixed, theta)};
    return stage_loss(feats, tau_of(rho, bounds), LossStage::two, opt.terms, opt.literal);
}

template <class T>
T joint_objective(const EncoderParamsT<T>& theta1, T rho1, const EncoderParamsT<T>& theta2, T rho2,
                  const JointBatch& b, const Temperature& bounds, const ObjectiveOptions& opt) {
    const Mat<T> F = encode_batch<T>(b.first.clouds, theta1);
    const Mat<T> image = b.first.image.cast<T>();
    const Mat<T> text = b.first.text.cast<T>();
    BatchFeaturesT<T> first{mix_rows<T>(F, b.first.pairs, opt.renormalize),
                            mix_rows<T>(image, b.first.pairs, opt.renormalize),
                            mix_rows<T>(text, b.first.pairs, opt.renormalize),
                            {}};
    BatchFeaturesT<T> second{mix_rows<T>(F, b.pairs, opt.renormalize),
                             mix_rows<T>(image, b.pairs, opt.renormalize),
                             mix_rows<T>(text, b.pairs, opt.renormalize),
                             encode_batch<T>(b.mixed, theta2)};
    return stage_loss(first, tau_of(rho1, bounds), LossStage::one, opt.terms, opt.literal) +
           stage_loss(second, tau_of(rho2, bounds), LossStage::two, opt.terms, opt.literal);
}

struct StageGradient {
    double loss = 0.0;
    EncoderParams grad;
    double drho = 0.0;
};

/// Stage-one loss and its exact gradient; mixing records go to `log` when given.
inline StageGradient stage1_gradient(const EncoderParams& theta, double rho, const Stage1Batch& b,
                                     const Temperature& bounds, const ObjectiveOptions& opt,
                                     std::vector<PairRecord>* log = nullptr,
                                     std::uint64_t step = 0) {
    const TapedBatch taped = encode_batch_taped(b.clouds, theta, opt.threads);
    BatchFeatures feats{mix_rows(taped.features, b.pairs, opt.renormalize, log, 'P', step),
                        mix_rows(b.image, b.pairs, opt.renormalize, log, 'I', step),
                        mix_rows(b.text, b.pairs, opt.renormalize, log, 'T', step),
                        {}};
    const double tau = tau_of(rho, bounds);
    const LossGradients lg = loss_backward(feats, tau, LossStage::one, opt.terms, opt.literal);
    const MatD dF = mix_rows_backward(taped.features, b.pairs, opt.renormalize, lg.dP);
    return {lg.value, backward_batch(taped, theta, dF, opt.threads), lg.drho};
}

/// Stage-two loss and gradient with respect to the new encoder and its rho only.
inline StageGradient stage2_gradient(const EncoderParams& theta, double rho, const Stage2Batch& b,
                                     const Temperature& bounds, const ObjectiveOptions& opt) {
    const TapedBatch taped = encode_batch_taped(b.mixed, theta, opt.threads);
    BatchFeatures feats{b.target_point, b.target_image, b.target_text, taped.features};
    const LossGradients lg =
        loss_backward(feats, tau_of(rho, bounds), LossStage::two, opt.terms, opt.literal);
    return {lg.value, backward_batch(taped, theta, lg.dM, opt.threads), lg.drho};
}

struct JointGradient {
    double loss_first = 0.0;
    double loss_second = 0.0;
    EncoderParams grad1;
    double drho1 = 0.0;
    EncoderParams grad2;
    double drho2 = 0.0;
};

inline JointGradient joint_gradient(const EncoderParams& theta1, double rho1,
                                    const EncoderParams& theta2, double rho2, const JointBatch& b,
                                    const Temperature& bounds, const ObjectiveOptions& opt,
                                    std::vector<PairRecord>* log = nullptr,
                                    std::uint64_t step = 0) {
    const TapedBatch t1 = encode_batch_taped(b.first.clouds, theta1, opt.threads);
    const TapedBatch t2 = encode_batch_taped(b.mixed, theta2, opt.threads);
    const auto& F = t1.features;

    BatchFeatures first{mix_rows(F, b.first.pairs, opt.renormalize, log, 'P', step),
                        mix_rows(b.first.image, b.first.pairs, opt.renormalize, log, 'I', step),
                        mix_rows(b.first.text, b.first.pairs, opt.renormalize, log, 'T', step),
                        {}};
    if (log) {
        for (const auto& p : b.pairs) {
            PairRecord r{step, p.i, p.j, p.lambda, std::nullopt, std::nullopt, 'M'};
            if (p.mask) {
                r.n_from_first = p.mask->n_from_first;
                r.n_points = p.mask->size();
            }
            log->push_back(r);
        }
    }
    BatchFeatures second{mix_rows(F, b.pairs, opt.renormalize, log, 'P', step),
                         mix_rows(b.first.image, b.pairs, opt.renormalize, log, 'I', step),
                         mix_rows(b.first.text, b.pairs, opt.renormalize, log, 'T', step),
                         t2.features};
    const LossGradients g1 =
        loss_backward(first, tau_of(rho1, bounds), LossStage::one, opt.terms, opt.literal);
    const LossGradients g2 =
        loss_backward(second, tau_of(rho2, bounds), LossStage::two, opt.terms, opt.literal);

    MatD dF = mix_rows_backward(F, b.first.pairs, opt.renormalize, g1.dP);
    dF += mix_rows_backward(F, b.pairs, opt.renormalize, g2.dP);

    JointGradient out;
    out.loss_first = g1.value;
    out.loss_second = g2.value;
    out.grad1 = backward_batch(t1, theta1, dF, opt.threads);
    out.drho1 = g1.drho;
    out.grad2 = backward_batch(t2, theta2, g2.dM, opt.threads);
    out.drho2 = g2.drho;
    return out;
}

} // namespace mmx
