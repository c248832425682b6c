#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mmx/config.hpp"
#include "mmx/encoder.hpp"
#include "mmx/frozen.hpp"
#include "mmx/objective.hpp"
#include "mmx/optim.hpp"

namespace mmx {

struct StepRow {
    std::size_t epoch = 0;
    std::uint64_t step = 0;
    int stage = 1;
    double loss = 0.0;
    double tau = 0.0;
    double lr = 0.0;
};

struct StepLog {
    std::vector<StepRow> rows;
    std::vector<PairRecord> pairs;
};

struct TrainResult {
    EncoderParams params;
    Temperature temperature;
    std::uint64_t steps = 0;
    StepLog log;
};

struct OneStageResult {
    TrainResult first;
    TrainResult second;
};

struct TrainOptions {
    unsigned threads = 1;
    std::ostream* progress = nullptr;  // one line per epoch when set
};

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string steps_csv(const StepLog& log) {
    std::string out = "epoch,step,stage,loss,tau,lr\n";
    for (const auto& r : log.rows) {
        out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + std::to_string(r.stage) +
               "," + format_double(r.loss) + "," + format_double(r.tau) + "," + format_double(r.lr) + "\n";
    }
    return out;
}

/// The mixing-module columns, plus the modality each record was applied to.
inline std::string pairs_csv(const StepLog& log) {
    std::string out = "step,i,j,lambda,n_from_first,N,modality\n";
    for (const auto& p : log.pairs) {
        out += std::to_string(p.step) + "," + std::to_string(p.i) + "," + std::to_string(p.j) + "," +
               format_double(p.lambda) + "," +
               (p.n_from_first ? std::to_string(*p.n_from_first) : std::string()) + "," +
               (p.n_points ? std::to_string(*p.n_points) : std::string()) + "," + p.modality + "\n";
    }
    return out;
}

namespace detail {

inline constexpr std::uint64_t kStageOneTag = 1;
inline constexpr std::uint64_t kStageTwoTag = 2;
inline constexpr std::uint64_t kJointTag = 3;

inline void check_caches(const TrainConfig& c, std::span<const PointCloud> data,
                         const EmbeddingCache& text, const EmbeddingCache& image) {
    if (text.dim != c.dim || image.dim != c.dim) {
        throw ShapeError("cache dimension (" + std::to_string(text.dim) + ", " +
                         std::to_string(image.dim) + ") does not match model.dim " +
                         std::to_string(c.dim));
    }
    for (const auto& pc : data) {
        (void)text.at(pc.id);
        (void)image.at(pc.id);
    }
}

inline MatD cache_rows(const EmbeddingCache& cache, std::span<const PointCloud> data,
                       std::span<const std::size_t> idx) {
    MatD out(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(cache.dim));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        out.row(static_cast<Eigen::Index>(k)) = cache.at(data[idx[k]].id).transpose();
    }
    return out;
}

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t tag, std::size_t epoch,
                                            std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(seed, Stream::shuffle, tag, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::size_t batches_per_epoch(const TrainConfig& c, std::size_t n_samples, std::size_t epochs) {
    const std::size_t batches = n_samples / c.batch_size;
    if (batches == 0 && epochs > 0) {
        throw ConfigError("dataset of " + std::to_string(n_samples) +
                          " samples is smaller than one batch of " + std::to_string(c.batch_size));
    }
    return batches;
}

inline ObjectiveOptions objective_options(const TrainConfig& c, unsigned threads) {
    return {c.loss_terms, c.renormalize_mixed, c.literal_eq4, threads};
}

inline std::vector<ParamSlot> make_slots(EncoderParams& p, const EncoderParams& g, Temperature& t,
                                         const double& drho) {
    std::vector<ParamSlot> slots;
    const auto values = tensors(p);
    const auto grads = tensors(g);
    for (std::size_t k = 0; k < values.size(); ++k) {
        slots.push_back({kEncoderTensorNames[k], values[k], grads[k], true});
    }
    slots.push_back({"rho", std::span<double>(&t.rho, 1), std::span<const double>(&drho, 1), false});
    return slots;
}

inline void apply_update(EncoderParams& p, const EncoderParams& g, Temperature& t, double drho,
                         AdamWState& state, double lr, double wd) {
    const auto slots = make_slots(p, g, t, drho);
    adamw_step(slots, state, lr, wd);
    t.clamp();
}

/// Runs one gradient evaluation; numeric breakdowns inside it (non-finite
/// similarities, a collapsed feature) are reported against the step.
template <class F>
auto guarded_step(std::uint64_t step, F&& f) {
    try {
        return f();
    } catch (const DegenerateError& e) {
        throw NumericError(step, "features", 0, std::string(e.what()) + "; last good step " +
                                                    std::to_string(step - 1));
    } catch (const DomainError& e) {
        throw NumericError(step, "loss", 0, std::string(e.what()) + "; last good step " +
                                                std::to_string(step - 1));
    }
}

inline void require_finite_loss(double loss, std::uint64_t step) {
    if (!std::isfinite(loss)) {
        throw NumericError(step, "loss", 0,
                           "non-finite loss; last good step " + std::to_string(step - 1));
    }
}

inline std::vector<CloudView> views(std::span<const PointCloud> data, std::span<const std::size_t> idx) {
    std::vector<CloudView> out;
    out.reserve(idx.size());
    for (std::size_t k : idx) out.emplace_back(data[k].points);
    return out;
}

/// FPS subsample to m points from a seeded random start.
inline PointCloud fps_subsample(const PointCloud& pc, std::size_t m, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
    const auto idx = fps(pc.points, m, pick(rng));
    return PointCloud{pc.id, pc.class_id, gather(pc.points, idx)};
}

/// Input-level mixing for one batch. Without input mixing each sample is only
/// FPS-subsampled and `pairs` stays empty.
struct InputMixPlan {
    std::vector<std::vector<Point3>> clouds;
    std::vector<MixedPair> pairs;
};

inline InputMixPlan plan_input_mix(const TrainConfig& c, std::span<const PointCloud> data,
                                   std::span<const std::size_t> idx, std::uint64_t tag,
                                   std::uint64_t step) {
    const std::size_t n = idx.size();
    InputMixPlan plan;
    plan.clouds.reserve(n);
    Rng fps_rng = make_rng(c.seed, Stream::fps, tag, step);
    if (!uses_input_mix(c.mix_mode)) {
        for (std::size_t k = 0; k < n; ++k) {
            plan.clouds.push_back(fps_subsample(data[idx[k]], c.fps_points, fps_rng).points);
        }
        return plan;
    }
    Rng pair_rng = make_rng(c.seed, Stream::pairing, tag, step);
    Rng lambda_rng = make_rng(c.seed, Stream::lambda, tag, step);
    Rng mask_rng = make_rng(c.seed, Stream::masks, tag, step);
    const auto perm = make_pairing(n, pair_rng);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = perm[k];
        const PointCloud first = fps_subsample(data[idx[k]], c.fps_points, fps_rng);
        const PointCloud second = fps_subsample(data[idx[j]], c.fps_points, fps_rng);
        MixMask mask = build_mask(c.fps_points, sample_lambda(c.beta, lambda_rng), mask_rng);
        plan.clouds.push_back(input_mix(first, second, mask).points);
        const double realized = mask.realized_lambda();
        plan.pairs.push_back({k, j, realized, std::move(mask)});
    }
    return plan;
}

inline std::vector<MixedPair> plan_feature_mix(const TrainConfig& c, std::size_t n, std::uint64_t tag,
                                               std::uint64_t step) {
    Rng pair_rng = make_rng(c.seed, Stream::pairing, tag, step);
    Rng lambda_rng = make_rng(c.seed, Stream::lambda, tag, step);
    const auto perm = make_pairing(n, pair_rng);
    std::vector<MixedPair> pairs;
    pairs.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        pairs.push_back({k, perm[k], sample_lambda(c.beta, lambda_rng), std::nullopt});
    }
    return pairs;
}

inline void log_mixed_inputs(StepLog& log, std::span<const MixedPair> pairs, std::uint64_t step) {
    for (const auto& p : pairs) {
        log.pairs.push_back({step, p.i, p.j, p.lambda, p.mask->n_from_first, p.mask->size(), 'M'});
    }
}

inline void report_epoch(const TrainOptions& opt, const char* stage, std::size_t epoch,
                         const StepLog& log, std::size_t rows_this_epoch) {
    if (!opt.progress || rows_this_epoch == 0) return;
    double sum = 0.0;
    for (std::size_t k = log.rows.size() - rows_this_epoch; k < log.rows.size(); ++k) sum += log.rows[k].loss;
    *opt.progress << stage << " epoch " << epoch << " mean loss "
                  << format_double(sum / static_cast<double>(rows_this_epoch)) << " tau "
                  << format_double(log.rows.back().tau) << '\n';
}

} // namespace detail

/// The seed each stage's encoder is initialized from.
inline std::uint64_t stage_init_seed(const TrainConfig& c, int stage) {
    return stage == 1 ? c.seed : derive_seed(c.seed, Stream::init, 2);
}

/// Stage one: trainable point encoder against frozen (cached) image/text
/// embeddings, optionally with shared feature-level mixing.
inline TrainResult train_stage1(const TrainConfig& c, std::span<const PointCloud> data,
                                const EmbeddingCache& text, const EmbeddingCache& image,
                                const TrainOptions& opt = {}) {
    validate(c);
    if (!c.loss_terms.text && !c.loss_terms.image) {
        throw ConfigError("stage one needs the text or image loss term");
    }
    detail::check_caches(c, data, text, image);
    const std::size_t batches = detail::batches_per_epoch(c, data.size(), c.epochs_stage1);
    const auto objective = detail::objective_options(c, opt.threads);

    TrainResult r{init_params(stage_init_seed(c, 1), c.hidden, c.dim), c.temperature(), 0, {}};
    AdamWState adam;
    for (std::size_t epoch = 0; epoch < c.epochs_stage1; ++epoch) {
        const double lr = lr_at(epoch, c.lr0, c.lr_gamma);
        const auto order = detail::epoch_order(c.seed, detail::kStageOneTag, epoch, data.size());
        for (std::size_t b = 0; b < batches; ++b) {
            const std::uint64_t step = r.steps + 1;
            const std::span<const std::size_t> idx(order.data() + b * c.batch_size, c.batch_size);
            Stage1Batch batch{detail::views(data, idx), detail::cache_rows(image, data, idx),
                              detail::cache_rows(text, data, idx), {}};
            if (uses_feature_mix(c.mix_mode)) {
                batch.pairs = detail::plan_feature_mix(c, idx.size(), detail::kStageOneTag, step);
            }
            const double tau = r.temperature.tau();
            const StageGradient g = detail::guarded_step(step, [&] {
                return stage1_gradient(r.params, r.temperature.rho, batch, r.temperature, objective,
                                       &r.log.pairs, step);
            });
            detail::require_finite_loss(g.loss, step);
            detail::apply_update(r.params, g.grad, r.temperature, g.drho, adam, lr, c.weight_decay);
            r.steps = step;
            r.log.rows.push_back({epoch, step, 1, g.loss, tau, lr});
        }
        detail::report_epoch(opt, "stage1", epoch, r.log, batches);
    }
    return r;
}

/// Stage two: a fresh encoder on input-mixed clouds, aligned to feature-mixed
/// targets from the frozen stage-one encoder and the frozen caches.
inline TrainResult train_stage2(const TrainConfig& c, std::span<const PointCloud> data,
                                const EmbeddingCache& text, const EmbeddingCache& image,
                                const EncoderParams& theta1, const TrainOptions& opt = {}) {
    validate(c);
    detail::check_caches(c, data, text, image);
    if (theta1.dim() != c.dim || theta1.hidden() != c.hidden) {
        throw ShapeError("stage-one encoder shape does not match the config");
    }
    for (const auto& pc : data) {
        if (pc.size() < c.fps_points) {
            throw DomainError("sample " + std::to_string(pc.id) + " has fewer than fps_points points");
        }
    }
    const std::size_t batches = detail::batches_per_epoch(c, data.size(), c.epochs_stage2);
    const auto objective = detail::objective_options(c, opt.threads);

    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const MatD frozen_point = encode_batch<double>(detail::views(data, all), theta1, opt.threads);

    TrainResult r{init_params(stage_init_seed(c, 2), c.hidden, c.dim), c.temperature(), 0, {}};
    AdamWState adam;
    for (std::size_t epoch = 0; epoch < c.epochs_stage2; ++epoch) {
        const double lr = lr_at(epoch, c.lr0, c.lr_gamma);
        const auto order = detail::epoch_order(c.seed, detail::kStageTwoTag, epoch, data.size());
        for (std::size_t b = 0; b < batches; ++b) {
            const std::uint64_t step = r.steps + 1;
            const std::span<const std::size_t> idx(order.data() + b * c.batch_size, c.batch_size);
            const auto plan = detail::plan_input_mix(c, data, idx, detail::kStageTwoTag, step);
            detail::log_mixed_inputs(r.log, plan.pairs, step);

            MatD point(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(c.dim));
            for (std::size_t k = 0; k < idx.size(); ++k) {
                point.row(static_cast<Eigen::Index>(k)) = frozen_point.row(static_cast<Eigen::Index>(idx[k]));
            }
            Stage2Batch batch;
            for (const auto& cloud : plan.clouds) batch.mixed.emplace_back(cloud);
            batch.target_point = mix_rows(point, plan.pairs, c.renormalize_mixed, &r.log.pairs, 'P', step);
            batch.target_image = mix_rows(detail::cache_rows(image, data, idx), plan.pairs,
                                          c.renormalize_mixed, &r.log.pairs, 'I', step);
            batch.target_text = mix_rows(detail::cache_rows(text, data, idx), plan.pairs,
                                         c.renormalize_mixed, &r.log.pairs, 'T', step);

            const double tau = r.temperature.tau();
            const StageGradient g = detail::guarded_step(step, [&] {
                return stage2_gradient(r.params, r.temperature.rho, batch, r.temperature, objective);
            });
            detail::require_finite_loss(g.loss, step);
            detail::apply_update(r.params, g.grad, r.temperature, g.drho, adam, lr, c.weight_decay);
            r.steps = step;
            r.log.rows.push_back({epoch, step, 2, g.loss, tau, lr});
        }
        detail::report_epoch(opt, "stage2", epoch, r.log, batches);
    }
    return r;
}

/// Both encoders trained simultaneously on L1(theta1) + L2(theta2) for
/// epochs_stage1 + epochs_stage2 epochs; stage-two point targets use live theta1.
inline OneStageResult train_one_stage(const TrainConfig& c, std::span<const PointCloud> data,
                                      const EmbeddingCache& text, const EmbeddingCache& image,
                                      const TrainOptions& opt = {}) {
    validate(c);
    if (!c.loss_terms.text && !c.loss_terms.image) {
        throw ConfigError("stage one needs the text or image loss term");
    }
    detail::check_caches(c, data, text, image);
    const std::size_t epochs = c.epochs_stage1 + c.epochs_stage2;
    const std::size_t batches = detail::batches_per_epoch(c, data.size(), epochs);
    const auto objective = detail::objective_options(c, opt.threads);

    OneStageResult r{{init_params(stage_init_seed(c, 1), c.hidden, c.dim), c.temperature(), 0, {}},
                     {init_params(stage_init_seed(c, 2), c.hidden, c.dim), c.temperature(), 0, {}}};
    AdamWState adam1;
    AdamWState adam2;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr = lr_at(epoch, c.lr0, c.lr_gamma);
        const auto order = detail::epoch_order(c.seed, detail::kJointTag, epoch, data.size());
        for (std::size_t b = 0; b < batches; ++b) {
            const std::uint64_t step = r.second.steps + 1;
            const std::span<const std::size_t> idx(order.data() + b * c.batch_size, c.batch_size);
            auto plan = detail::plan_input_mix(c, data, idx, detail::kJointTag, step);

            JointBatch batch;
            batch.first = {detail::views(data, idx), detail::cache_rows(image, data, idx),
                           detail::cache_rows(text, data, idx), {}};
            if (uses_feature_mix(c.mix_mode)) {
                // one pairing per step: reuse the input-level pairs when present
                batch.first.pairs = plan.pairs.empty()
                                        ? detail::plan_feature_mix(c, idx.size(), detail::kJointTag, step)
                                        : plan.pairs;
            }
            for (const auto& cloud : plan.clouds) batch.mixed.emplace_back(cloud);
            batch.pairs = plan.pairs;

            const double tau1 = r.first.temperature.tau();
            const double tau2 = r.second.temperature.tau();
            const JointGradient g = detail::guarded_step(step, [&] {
                return joint_gradient(r.first.params, r.first.temperature.rho, r.second.params,
                                      r.second.temperature.rho, batch, r.first.temperature, objective,
                                      &r.second.log.pairs, step);
            });
            detail::require_finite_loss(g.loss_first, step);
            detail::require_finite_loss(g.loss_second, step);
            detail::apply_update(r.first.params, g.grad1, r.first.temperature, g.drho1, adam1, lr,
                                 c.weight_decay);
            detail::apply_update(r.second.params, g.grad2, r.second.temperature, g.drho2, adam2, lr,
                                 c.weight_decay);
            r.first.steps = r.second.steps = step;
            r.first.log.rows.push_back({epoch, step, 1, g.loss_first, tau1, lr});
            r.second.log.rows.push_back({epoch, step, 2, g.loss_second, tau2, lr});
        }
        detail::report_epoch(opt, "one-stage", epoch, r.second.log, batches);
    }
    return r;
}

} // namespace mmx
