#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "mmx/binary_io.hpp"
#include "mmx/errors.hpp"
#include "mmx/geometry.hpp"
#include "mmx/losses.hpp"

namespace mmx {

enum class MixMode { none, fm, im, fm_im };
enum class StageMode { one, two };

inline bool uses_feature_mix(MixMode m) { return m == MixMode::fm || m == MixMode::fm_im; }
inline bool uses_input_mix(MixMode m) { return m == MixMode::im || m == MixMode::fm_im; }

inline const char* to_string(MixMode m) {
    switch (m) {
    case MixMode::none: return "none";
    case MixMode::fm: return "fm";
    case MixMode::im: return "im";
    case MixMode::fm_im: return "fm_im";
    }
    return "?";
}

inline const char* to_string(StageMode m) { return m == StageMode::one ? "one" : "two"; }

/// Every knob of the two-stage pipeline.
struct TrainConfig {
    std::uint64_t seed = 0;
    std::uint32_t num_classes = 8;
    std::size_t points_per_cloud = 256;
    std::size_t fps_points = 256;
    std::size_t train_size = 800;
    std::size_t eval_size = 200;
    double jitter = 0.01;
    double sigma_image = 0.1;
    std::size_t dim = 32;
    std::size_t hidden = 64;
    std::size_t batch_size = 200;
    std::size_t epochs_stage1 = 30;
    std::size_t epochs_stage2 = 30;
    double lr0 = 1e-3;
    double lr_gamma = 0.955;
    double weight_decay = 0.01;
    StageMode stage_mode = StageMode::two;
    MixMode mix_mode = MixMode::fm_im;
    double beta = 1.0;
    bool renormalize_mixed = true;
    LossTerms loss_terms{};
    double tau_init = 0.07;
    double tau_min = 0.01;
    double tau_max = 100.0;
    bool literal_eq4 = false;

    bool operator==(const TrainConfig&) const = default;

    Temperature temperature() const { return Temperature::from_tau(tau_init, tau_min, tau_max); }
};

namespace detail {

template <class N>
N parse_number(std::string_view key, std::string_view text) {
    N value{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("invalid value '" + std::string(text) + "' for key " + std::string(key));
    }
    return value;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("invalid boolean '" + std::string(text) + "' for key " + std::string(key));
}

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

using Setter = std::function<void(TrainConfig&, std::string_view key, std::string_view value)>;

template <class N>
Setter number(N TrainConfig::*field) {
    return [field](TrainConfig& c, std::string_view k, std::string_view v) {
        c.*field = parse_number<N>(k, v);
    };
}

inline const std::map<std::string, Setter, std::less<>>& config_setters() {
    static const std::map<std::string, Setter, std::less<>> setters = {
        {"seed", number(&TrainConfig::seed)},
        {"data.num_classes", number(&TrainConfig::num_classes)},
        {"data.points_per_cloud", number(&TrainConfig::points_per_cloud)},
        {"data.fps_points", number(&TrainConfig::fps_points)},
        {"data.train_size", number(&TrainConfig::train_size)},
        {"data.eval_size", number(&TrainConfig::eval_size)},
        {"data.jitter", number(&TrainConfig::jitter)},
        {"data.sigma_image", number(&TrainConfig::sigma_image)},
        {"model.dim", number(&TrainConfig::dim)},
        {"model.hidden", number(&TrainConfig::hidden)},
        {"train.batch_size", number(&TrainConfig::batch_size)},
        {"train.epochs_stage1", number(&TrainConfig::epochs_stage1)},
        {"train.epochs_stage2", number(&TrainConfig::epochs_stage2)},
        {"train.lr0", number(&TrainConfig::lr0)},
        {"train.lr_gamma", number(&TrainConfig::lr_gamma)},
        {"train.weight_decay", number(&TrainConfig::weight_decay)},
        {"train.stage_mode",
         [](TrainConfig& c, std::string_view k, std::string_view v) {
             if (v == "one") c.stage_mode = StageMode::one;
             else if (v == "two") c.stage_mode = StageMode::two;
             else throw ConfigError("invalid value '" + std::string(v) + "' for key " + std::string(k));
         }},
        {"mix.mode",
         [](TrainConfig& c, std::string_view k, std::string_view v) {
             if (v == "none") c.mix_mode = MixMode::none;
             else if (v == "fm") c.mix_mode = MixMode::fm;
             else if (v == "im") c.mix_mode = MixMode::im;
             else if (v == "fm_im") c.mix_mode = MixMode::fm_im;
             else throw ConfigError("invalid value '" + std::string(v) + "' for key " + std::string(k));
         }},
        {"mix.beta", number(&TrainConfig::beta)},
        {"mix.renormalize",
         [](TrainConfig& c, std::string_view k, std::string_view v) {
             c.renormalize_mixed = parse_bool(k, v);
         }},
        {"loss.terms",
         [](TrainConfig& c, std::string_view k, std::string_view v) {
             try {
                 c.loss_terms = parse_loss_terms(v);
             } catch (const DomainError& e) {
                 throw ConfigError(std::string(k) + ": " + e.what());
             }
         }},
        {"loss.tau_init", number(&TrainConfig::tau_init)},
        {"loss.tau_min", number(&TrainConfig::tau_min)},
        {"loss.tau_max", number(&TrainConfig::tau_max)},
        {"loss.literal_eq4",
         [](TrainConfig& c, std::string_view k, std::string_view v) {
             c.literal_eq4 = parse_bool(k, v);
         }},
    };
    return setters;
}

} // namespace detail

inline void validate(const TrainConfig& c) {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (c.num_classes < 2 || c.num_classes > kNumShapes) fail("data.num_classes must be in [2, 8]");
    if (c.points_per_cloud < kMinShapePoints) fail("data.points_per_cloud must be >= 8");
    if (c.fps_points == 0 || c.fps_points > c.points_per_cloud) {
        fail("data.fps_points must be in [1, data.points_per_cloud]");
    }
    if (!(c.jitter >= 0.0)) fail("data.jitter must be >= 0");
    if (!(c.sigma_image >= 0.0)) fail("data.sigma_image must be >= 0");
    if (c.dim < 8) fail("model.dim must be >= 8");
    if (c.hidden < 4) fail("model.hidden must be >= 4");
    if (c.batch_size < 2) fail("train.batch_size must be >= 2");
    if (!(c.lr0 > 0.0)) fail("train.lr0 must be > 0");
    if (!(c.lr_gamma > 0.0 && c.lr_gamma <= 1.0)) fail("train.lr_gamma must be in (0, 1]");
    if (!(c.weight_decay >= 0.0)) fail("train.weight_decay must be >= 0");
    if (!(c.beta > 0.0)) fail("mix.beta must be > 0");
    if (!(c.tau_min > 0.0 && c.tau_min <= c.tau_init && c.tau_init <= c.tau_max)) {
        fail("need 0 < loss.tau_min <= loss.tau_init <= loss.tau_max");
    }
    if (!c.loss_terms.text && !c.loss_terms.image && !c.loss_terms.point) fail("loss.terms is empty");
}

/// Flat `key = value` lines; '#' starts a comment. Unknown or repeated keys are errors.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}) {
    const auto& setters = detail::config_setters();
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto eol = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end()) {
            throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" +
                              std::string(key) + "'");
        }
        if (!seen.emplace(key).second) {
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" +
                              std::string(key) + "'");
        }
        try {
            it->second(base, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    validate(base);
    return base;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path));
}

/// Canonical text form; parse_config(to_text(c)) == c.
inline std::string to_text(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "seed = " << c.seed << '\n'
       << "data.num_classes = " << c.num_classes << '\n'
       << "data.points_per_cloud = " << c.points_per_cloud << '\n'
       << "data.fps_points = " << c.fps_points << '\n'
       << "data.train_size = " << c.train_size << '\n'
       << "data.eval_size = " << c.eval_size << '\n'
       << "data.jitter = " << c.jitter << '\n'
       << "data.sigma_image = " << c.sigma_image << '\n'
       << "model.dim = " << c.dim << '\n'
       << "model.hidden = " << c.hidden << '\n'
       << "train.batch_size = " << c.batch_size << '\n'
       << "train.epochs_stage1 = " << c.epochs_stage1 << '\n'
       << "train.epochs_stage2 = " << c.epochs_stage2 << '\n'
       << "train.lr0 = " << c.lr0 << '\n'
       << "train.lr_gamma = " << c.lr_gamma << '\n'
       << "train.weight_decay = " << c.weight_decay << '\n'
       << "train.stage_mode = " << to_string(c.stage_mode) << '\n'
       << "mix.mode = " << to_string(c.mix_mode) << '\n'
       << "mix.beta = " << c.beta << '\n'
       << "mix.renormalize = " << (c.renormalize_mixed ? "true" : "false") << '\n'
       << "loss.terms = " << to_string(c.loss_terms) << '\n'
       << "loss.tau_init = " << c.tau_init << '\n'
       << "loss.tau_min = " << c.tau_min << '\n'
       << "loss.tau_max = " << c.tau_max << '\n'
       << "loss.literal_eq4 = " << (c.literal_eq4 ? "true" : "false") << '\n';
    return os.str();
}

} // namespace mmx
