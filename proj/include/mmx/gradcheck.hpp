#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mmx/config.hpp"
#include "mmx/dataset.hpp"
#include "mmx/encoder.hpp"
#include "mmx/frozen.hpp"
#include "mmx/objective.hpp"
#include "mmx/trainer.hpp"

namespace mmx {

struct GradcheckOptions {
    std::size_t hidden = 8;
    std::size_t dim = 8;
    std::size_t batch = 4;
    std::size_t points = 16;
    std::size_t encoder_configs = 50;
    double step = 1e-6;
    double encoder_tol = 1e-6;
    double e2e_tol = 1e-4;
    // Denominator floor of the relative error; entries whose true gradient is
    // below it are compared on absolute error scaled by the floor.
    double floor = 1e-6;
    // Flips the sign of the analytic gradient of every tensor with this name
    // ("W2", "b1", "rho", ...); exercises the failure path.
    std::string fault_tensor;
};

struct SuiteResult {
    std::string name;
    std::size_t checked = 0;
    double tolerance = 0.0;
    double max_rel = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = true;
};

struct GradcheckReport {
    std::vector<SuiteResult> suites;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& s : suites) {
            if (!s.passed) return false;
        }
        return true;
    }
    /// The suite whose worst entry is furthest over (or closest to) its tolerance.
    const SuiteResult& worst() const {
        const SuiteResult* w = &suites.front();
        for (const auto& s : suites) {
            if (s.max_rel / s.tolerance > w->max_rel / w->tolerance) w = &s;
        }
        return *w;
    }
};

inline double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

namespace detail {

using LD = long double;

/// Named flat segment of a parameter vector.
struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct FlatParams {
    std::vector<Segment> segments;
    std::vector<double> values;

    void add(const std::string& prefix, const EncoderParams& p) {
        const auto ts = tensors(p);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            segments.push_back({prefix + kEncoderTensorNames[k], values.size(), ts[k].size()});
            values.insert(values.end(), ts[k].begin(), ts[k].end());
        }
    }
    void add(const std::string& name, double v) {
        segments.push_back({name, values.size(), 1});
        values.push_back(v);
    }
};

inline void append(std::vector<double>& out, const EncoderParams& g) {
    for (auto t : tensors(g)) out.insert(out.end(), t.begin(), t.end());
}

/// Rebuilds an encoder in long double from `x` starting at `offset`.
inline EncoderParamsT<LD> unpack(const std::vector<LD>& x, std::size_t offset, std::size_t h,
                                 std::size_t d) {
    auto p = EncoderParamsT<LD>::zeros(h, d);
    for (auto t : tensors(p)) {
        std::copy(x.begin() + static_cast<std::ptrdiff_t>(offset),
                  x.begin() + static_cast<std::ptrdiff_t>(offset + t.size()), t.begin());
        offset += t.size();
    }
    return p;
}

inline bool fault_matches(const std::string& segment, const std::string& fault) {
    if (fault.empty()) return false;
    if (segment == fault) return true;
    return segment.size() > fault.size() &&
           segment.compare(segment.size() - fault.size() - 1, std::string::npos, "." + fault) == 0;
}

/// Compares analytic against central differences of `f` around `flat`, folding into `res`.
inline void compare(SuiteResult& res, const FlatParams& flat, std::vector<double> analytic,
                    const std::function<LD(const std::vector<LD>&)>& f, const GradcheckOptions& opt) {
    for (const auto& seg : flat.segments) {
        if (!fault_matches(seg.name, opt.fault_tensor)) continue;
        for (std::size_t k = 0; k < seg.size; ++k) analytic[seg.offset + k] = -analytic[seg.offset + k];
    }
    std::vector<LD> x(flat.values.begin(), flat.values.end());
    const LD h = opt.step;
    for (const auto& seg : flat.segments) {
        for (std::size_t k = 0; k < seg.size; ++k) {
            const std::size_t at = seg.offset + k;
            const LD saved = x[at];
            x[at] = saved + h;
            const LD up = f(x);
            x[at] = saved - h;
            const LD down = f(x);
            x[at] = saved;
            const double numeric = static_cast<double>((up - down) / (2 * h));
            const double err = relative_error(analytic[at], numeric, opt.floor);
            res.checked += 1;
            const double e = std::isnan(err) ? INFINITY : err;
            if (res.worst_tensor.empty() || e > res.max_rel) {
                res.max_rel = e;
                res.worst_tensor = seg.name;
                res.worst_index = k;
                res.worst_analytic = analytic[at];
                res.worst_numeric = numeric;
            }
        }
    }
    res.passed = res.max_rel <= res.tolerance;
}

/// Random small biases so every ReLU branch is exercised.
inline EncoderParams gradcheck_params(std::uint64_t seed, std::size_t h, std::size_t d, std::uint64_t which) {
    EncoderParams p = init_params(derive_seed(seed, Stream::gradcheck, which), h, d);
    Rng rng = make_rng(seed, Stream::gradcheck, which, 1);
    std::normal_distribution<double> gauss(0.0, 0.1);
    for (auto* b : {&p.b1, &p.b2, &p.b3}) {
        for (Eigen::Index k = 0; k < b->size(); ++k) (*b)(k) = gauss(rng);
    }
    return p;
}

/// Everything the end-to-end suites share: a tiny dataset, caches and a config.
struct E2EFixture {
    TrainConfig config;
    std::vector<PointCloud> data;
    MatD image;
    MatD text;
    std::vector<std::size_t> idx;
};

inline E2EFixture make_fixture(const TrainConfig& base, const GradcheckOptions& opt) {
    E2EFixture fx;
    fx.config = base;
    fx.config.dim = opt.dim;
    fx.config.hidden = opt.hidden;
    fx.config.points_per_cloud = opt.points;
    fx.config.fps_points = opt.points;
    fx.config.batch_size = opt.batch;
    fx.data = generate_dataset({base.seed, base.num_classes, opt.batch, opt.points, base.jitter, 0});
    const auto model = build_model(base.seed, base.num_classes, opt.dim, base.sigma_image);
    const auto refs = sample_refs(fx.data);
    const auto text = precache(refs, model, Modality::text);
    const auto image = precache(refs, model, Modality::image);
    fx.idx.resize(opt.batch);
    std::iota(fx.idx.begin(), fx.idx.end(), std::size_t{0});
    fx.image = cache_rows(image, fx.data, fx.idx);
    fx.text = cache_rows(text, fx.data, fx.idx);
    return fx;
}

} // namespace detail

/// Encoder-only suite: scalar u . f(X) against every parameter, over random configurations.
inline SuiteResult gradcheck_encoder(std::uint64_t seed, const GradcheckOptions& opt) {
    SuiteResult res{"encoder", 0, opt.encoder_tol, 0.0, {}, 0, 0.0, 0.0, true};
    for (std::size_t cfg = 0; cfg < opt.encoder_configs; ++cfg) {
        const auto cls = static_cast<std::uint32_t>(cfg % kNumShapes);
        const PointCloud cloud = gen_shape(cls, opt.points, derive_seed(seed, Stream::gradcheck, 100 + cfg), 0.05);
        const EncoderParams p = detail::gradcheck_params(seed, opt.hidden, opt.dim, 1000 + cfg);
        Rng rng = make_rng(seed, Stream::gradcheck, 2000 + cfg);
        std::normal_distribution<double> gauss;
        VecD u(static_cast<Eigen::Index>(opt.dim));
        for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = gauss(rng);
        u.normalize();

        const auto out = forward<double>(cloud.points, p);
        const auto grads = backward(out.tape, p, u, false);
        detail::FlatParams flat;
        flat.add("", p);
        std::vector<double> analytic;
        detail::append(analytic, grads.params);
        const Vec<detail::LD> ul = u.cast<detail::LD>();
        detail::compare(res, flat, std::move(analytic), [&](const std::vector<detail::LD>& x) {
            const auto q = detail::unpack(x, 0, opt.hidden, opt.dim);
            return encode<detail::LD>(cloud.points, q).dot(ul);
        }, opt);
    }
    return res;
}

/// Stage-one objective with feature-level mixing, against theta and rho.
inline SuiteResult gradcheck_stage1(const TrainConfig& base, const GradcheckOptions& opt) {
    const auto fx = detail::make_fixture(base, opt);
    const auto objective = detail::objective_options(fx.config, 1);
    Stage1Batch batch{detail::views(fx.data, fx.idx), fx.image, fx.text, {}};
    if (uses_feature_mix(fx.config.mix_mode)) {
        batch.pairs = detail::plan_feature_mix(fx.config, opt.batch, detail::kStageOneTag, 1);
    }
    const Temperature temp = fx.config.temperature();
    const EncoderParams p = detail::gradcheck_params(base.seed, opt.hidden, opt.dim, 1);
    const StageGradient g = stage1_gradient(p, temp.rho, batch, temp, objective);

    detail::FlatParams flat;
    flat.add("theta1.", p);
    flat.add("rho", temp.rho);
    std::vector<double> analytic;
    detail::append(analytic, g.grad);
    analytic.push_back(g.drho);
    SuiteResult res{"stage1", 0, opt.e2e_tol, 0.0, {}, 0, 0.0, 0.0, true};
    const std::size_t n_theta = parameter_count(p);
    detail::compare(res, flat, std::move(analytic), [&](const std::vector<detail::LD>& x) {
        return stage1_objective<detail::LD>(detail::unpack(x, 0, opt.hidden, opt.dim), x[n_theta], batch,
                                            temp, objective);
    }, opt);
    return res;
}

/// Stage-two objective on input-mixed clouds with frozen mixed targets.
inline SuiteResult gradcheck_stage2(const TrainConfig& base, const GradcheckOptions& opt) {
    const auto fx = detail::make_fixture(base, opt);
    const auto objective = detail::objective_options(fx.config, 1);
    const auto plan = detail::plan_input_mix(fx.config, fx.data, fx.idx, detail::kStageTwoTag, 1);
    const EncoderParams theta1 = detail::gradcheck_params(base.seed, opt.hidden, opt.dim, 1);
    const MatD point = encode_batch<double>(detail::views(fx.data, fx.idx), theta1);

    Stage2Batch batch;
    for (const auto& cloud : plan.clouds) batch.mixed.emplace_back(cloud);
    batch.target_point = mix_rows(point, plan.pairs, fx.config.renormalize_mixed);
    batch.target_image = mix_rows(fx.image, plan.pairs, fx.config.renormalize_mixed);
    batch.target_text = mix_rows(fx.text, plan.pairs, fx.config.renormalize_mixed);

    const Temperature temp = fx.config.temperature();
    const EncoderParams p = detail::gradcheck_params(base.seed, opt.hidden, opt.dim, 2);
    const StageGradient g = stage2_gradient(p, temp.rho, batch, temp, objective);

    detail::FlatParams flat;
    flat.add("theta2.", p);
    flat.add("rho", temp.rho);
    std::vector<double> analytic;
    detail::append(analytic, g.grad);
    analytic.push_back(g.drho);
    SuiteResult res{"stage2", 0, opt.e2e_tol, 0.0, {}, 0, 0.0, 0.0, true};
    const std::size_t n_theta = parameter_count(p);
    detail::compare(res, flat, std::move(analytic), [&](const std::vector<detail::LD>& x) {
        return stage2_objective<detail::LD>(detail::unpack(x, 0, opt.hidden, opt.dim), x[n_theta], batch,
                                            temp, objective);
    }, opt);
    return res;
}

/// One-stage objective: both encoders and both temperatures, live stage-two targets.
inline SuiteResult gradcheck_joint(const TrainConfig& base, const GradcheckOptions& opt) {
    const auto fx = detail::make_fixture(base, opt);
    const auto objective = detail::objective_options(fx.config, 1);
    auto plan = detail::plan_input_mix(fx.config, fx.data, fx.idx, detail::kJointTag, 1);
    JointBatch batch;
    batch.first = {detail::views(fx.data, fx.idx), fx.image, fx.text, {}};
    if (uses_feature_mix(fx.config.mix_mode)) {
        batch.first.pairs = plan.pairs.empty()
                                ? detail::plan_feature_mix(fx.config, opt.batch, detail::kJointTag, 1)
                                : plan.pairs;
    }
    for (const auto& cloud : plan.clouds) batch.mixed.emplace_back(cloud);
    batch.pairs = plan.pairs;

    Temperature t1 = fx.config.temperature();
    Temperature t2 = t1;
    t2.rho += 0.25;  // distinct temperatures catch a swapped rho gradient
    const EncoderParams p1 = detail::gradcheck_params(base.seed, opt.hidden, opt.dim, 1);
    const EncoderParams p2 = detail::gradcheck_params(base.seed, opt.hidden, opt.dim, 2);
    const JointGradient g = joint_gradient(p1, t1.rho, p2, t2.rho, batch, t1, objective);

    detail::FlatParams flat;
    flat.add("theta1.", p1);
    flat.add("rho1", t1.rho);
    flat.add("theta2.", p2);
    flat.add("rho2", t2.rho);
    std::vector<double> analytic;
    detail::append(analytic, g.grad1);
    analytic.push_back(g.drho1);
    detail::append(analytic, g.grad2);
    analytic.push_back(g.drho2);
    SuiteResult res{"one-stage", 0, opt.e2e_tol, 0.0, {}, 0, 0.0, 0.0, true};
    const std::size_t n = parameter_count(p1);
    detail::compare(res, flat, std::move(analytic), [&](const std::vector<detail::LD>& x) {
        return joint_objective<detail::LD>(detail::unpack(x, 0, opt.hidden, opt.dim), x[n],
                                           detail::unpack(x, n + 1, opt.hidden, opt.dim), x[2 * n + 1],
                                           batch, t1, objective);
    }, opt);
    return res;
}

/// All four suites. Sizes come from `opt`; seed, mixing and loss settings from `base`.
inline GradcheckReport run_gradcheck(const TrainConfig& base, const GradcheckOptions& opt = {}) {
    const auto start = std::chrono::steady_clock::now();
    GradcheckReport rep;
    rep.suites.push_back(gradcheck_encoder(base.seed, opt));
    rep.suites.push_back(gradcheck_stage1(base, opt));
    rep.suites.push_back(gradcheck_stage2(base, opt));
    rep.suites.push_back(gradcheck_joint(base, opt));
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

} // namespace mmx
