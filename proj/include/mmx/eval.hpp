#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmx/binary_io.hpp"
#include "mmx/encoder.hpp"
#include "mmx/objective.hpp"
#include "mmx/optim.hpp"
#include "mmx/trainer.hpp"

namespace mmx {

struct ClassAccuracy {
    std::uint32_t class_id = 0;
    std::size_t count = 0;
    std::vector<double> accuracy;  // one per k, same order as EvalReport::ks
};

/// One query's ranking: classes (zero-shot, probe) or gallery items (retrieval).
struct SampleRecord {
    std::uint64_t id = 0;
    std::uint32_t true_class = 0;
    std::vector<std::uint32_t> top_classes;
    std::vector<double> top_scores;
    std::vector<std::uint64_t> top_ids;  // retrieval only
};

struct EvalReport {
    std::string protocol;
    std::vector<std::size_t> ks;
    std::vector<double> accuracy;  // top-k accuracy, or recall@k for retrieval
    std::vector<ClassAccuracy> per_class;
    std::vector<SampleRecord> samples;
    std::vector<double> train_loss;  // probe only: before training, then after each epoch

    double at(std::size_t k) const {
        for (std::size_t n = 0; n < ks.size(); ++n) {
            if (ks[n] == k) return accuracy[n];
        }
        throw DomainError("report has no k = " + std::to_string(k));
    }
};

/// Sequential dot product; the ranking code and its oracle share this exact order.
inline double dot_exact(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

inline std::span<const double> row_span(const MatD& m, Eigen::Index r) {
    return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

/// Indices sorted by descending score, ties by ascending key.
template <class Key>
std::vector<std::size_t> rank_desc(std::span<const double> scores, std::span<const Key> keys,
                                   std::size_t top) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return keys[a] < keys[b];
    };
    top = std::min(top, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(), better);
    order.resize(top);
    return order;
}

namespace detail {

inline void check_rows(const MatD& m, std::size_t labels, const char* what) {
    if (static_cast<std::size_t>(m.rows()) != labels) {
        throw ShapeError(std::string(what) + ": " + std::to_string(m.rows()) + " rows but " +
                         std::to_string(labels) + " labels");
    }
    if (!m.allFinite()) throw DomainError(std::string(what) + ": non-finite feature");
}

/// Fills accuracy and per_class from per-sample hit flags (hits[s][n] for ks[n]).
inline void summarize(EvalReport& rep, std::span<const std::uint32_t> labels,
                      const std::vector<std::vector<char>>& hits) {
    const std::size_t nk = rep.ks.size();
    rep.accuracy.assign(nk, 0.0);
    std::map<std::uint32_t, ClassAccuracy> by_class;
    for (std::size_t s = 0; s < labels.size(); ++s) {
        auto& ca = by_class[labels[s]];
        ca.class_id = labels[s];
        ca.accuracy.resize(nk, 0.0);
        ca.count += 1;
        for (std::size_t n = 0; n < nk; ++n) {
            if (hits[s][n]) {
                rep.accuracy[n] += 1.0;
                ca.accuracy[n] += 1.0;
            }
        }
    }
    for (auto& a : rep.accuracy) a /= static_cast<double>(std::max<std::size_t>(labels.size(), 1));
    for (auto& [cls, ca] : by_class) {
        for (auto& a : ca.accuracy) a /= static_cast<double>(ca.count);
        rep.per_class.push_back(ca);
    }
}

inline std::vector<std::uint32_t> class_keys(std::size_t n) {
    std::vector<std::uint32_t> keys(n);
    std::iota(keys.begin(), keys.end(), 0u);
    return keys;
}

} // namespace detail

/// Ranks classes by dot(feature, class embedding); ties go to the lower class index.
inline EvalReport zero_shot(const MatD& features, std::span<const std::uint32_t> labels,
                            const MatD& class_embeds, std::span<const std::size_t> ks,
                            std::span<const std::uint64_t> ids = {}) {
    detail::check_rows(features, labels.size(), "zero_shot");
    if (features.cols() != class_embeds.cols()) {
        throw ShapeError("zero_shot: feature dim " + std::to_string(features.cols()) +
                         " vs class embedding dim " + std::to_string(class_embeds.cols()));
    }
    const auto num_classes = static_cast<std::size_t>(class_embeds.rows());
    for (std::size_t k : ks) {
        if (k == 0 || k > num_classes) throw DomainError("zero_shot: k out of range");
    }
    for (auto l : labels) {
        if (l >= num_classes) throw DomainError("zero_shot: label " + std::to_string(l) + " >= C");
    }
    const std::size_t kmax = ks.empty() ? 1 : *std::max_element(ks.begin(), ks.end());
    const auto keys = detail::class_keys(num_classes);

    EvalReport rep;
    rep.protocol = "zeroshot";
    rep.ks.assign(ks.begin(), ks.end());
    std::vector<std::vector<char>> hits(labels.size());
    std::vector<double> scores(num_classes);
    for (std::size_t s = 0; s < labels.size(); ++s) {
        const auto f = row_span(features, static_cast<Eigen::Index>(s));
        for (std::size_t c = 0; c < num_classes; ++c) {
            scores[c] = dot_exact(f, row_span(class_embeds, static_cast<Eigen::Index>(c)));
        }
        const auto order = rank_desc<std::uint32_t>(scores, keys, kmax);
        SampleRecord rec{ids.empty() ? s : ids[s], labels[s], {}, {}, {}};
        for (std::size_t c : order) {
            rec.top_classes.push_back(static_cast<std::uint32_t>(c));
            rec.top_scores.push_back(scores[c]);
        }
        for (std::size_t k : ks) {
            hits[s].push_back(std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                                        labels[s]) != order.begin() + static_cast<std::ptrdiff_t>(k));
        }
        rep.samples.push_back(std::move(rec));
    }
    detail::summarize(rep, labels, hits);
    return rep;
}

/// recall@k: a query hits when any of its top-k gallery items shares its class.
/// Gallery ties go to the lower id; exclude_self drops the gallery item with the query's id.
inline EvalReport retrieval(const MatD& query, std::span<const std::uint64_t> query_ids,
                            std::span<const std::uint32_t> query_labels, const MatD& gallery,
                            std::span<const std::uint64_t> gallery_ids,
                            std::span<const std::uint32_t> gallery_labels, std::size_t k,
                            bool exclude_self) {
    detail::check_rows(query, query_labels.size(), "retrieval query");
    detail::check_rows(gallery, gallery_labels.size(), "retrieval gallery");
    if (query_ids.size() != query_labels.size() || gallery_ids.size() != gallery_labels.size()) {
        throw ShapeError("retrieval: ids and labels differ in length");
    }
    if (query.cols() != gallery.cols()) throw ShapeError("retrieval: dimension mismatch");
    const std::size_t available = gallery_labels.size() - (exclude_self ? 1 : 0);
    if (k == 0 || k > available || gallery_labels.empty()) {
        throw DomainError("retrieval: k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(available) + "]");
    }

    EvalReport rep;
    rep.protocol = "retrieval";
    rep.ks = {k};
    std::vector<std::vector<char>> hits(query_labels.size());
    std::vector<double> scores;
    std::vector<std::uint64_t> keys;
    std::vector<std::size_t> slots;
    for (std::size_t q = 0; q < query_labels.size(); ++q) {
        scores.clear();
        keys.clear();
        slots.clear();
        const auto f = row_span(query, static_cast<Eigen::Index>(q));
        for (std::size_t g = 0; g < gallery_labels.size(); ++g) {
            if (exclude_self && gallery_ids[g] == query_ids[q]) continue;
            scores.push_back(dot_exact(f, row_span(gallery, static_cast<Eigen::Index>(g))));
            keys.push_back(gallery_ids[g]);
            slots.push_back(g);
        }
        if (scores.size() < k) {
            throw DomainError("retrieval: fewer than k gallery items left for query " +
                              std::to_string(query_ids[q]));
        }
        const auto order = rank_desc<std::uint64_t>(scores, keys, k);
        SampleRecord rec{query_ids[q], query_labels[q], {}, {}, {}};
        bool hit = false;
        for (std::size_t o : order) {
            const std::size_t g = slots[o];
            rec.top_ids.push_back(gallery_ids[g]);
            rec.top_classes.push_back(gallery_labels[g]);
            rec.top_scores.push_back(scores[o]);
            hit = hit || gallery_labels[g] == query_labels[q];
        }
        hits[q].push_back(hit);
        rep.samples.push_back(std::move(rec));
    }
    detail::summarize(rep, query_labels, hits);
    return rep;
}

struct ProbeConfig {
    int layers = 1;  // 1: d->C; 2: d->d->C; 3: d->d->d->C
    std::size_t epochs = 100;
    double lr = 1e-2;
    std::size_t batch_size = 32;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> ks = {1, 3, 5};
};

/// Small MLP classification head trained with softmax cross-entropy and AdamW.
class ProbeHead {
public:
    ProbeHead(std::size_t dim, std::size_t num_classes, int layers, std::uint64_t seed) {
        if (layers < 1 || layers > 3) throw DomainError("probe supports 1 to 3 layers");
        Rng rng = make_rng(seed, Stream::probe, static_cast<std::uint64_t>(layers));
        for (int l = 0; l < layers; ++l) {
            const bool last = l + 1 == layers;
            const auto out = static_cast<Eigen::Index>(last ? num_classes : dim);
            const auto in = static_cast<Eigen::Index>(dim);
            std::normal_distribution<double> gauss(0.0, std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(dim)));
            MatD w(out, in);
            for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = gauss(rng);
            weights_.push_back(std::move(w));
            biases_.push_back(VecD::Zero(out));
        }
    }

    MatD logits(const MatD& x) const { return forward(x).back(); }

    /// Mean cross-entropy; fills gradients when `grads` is non-null.
    double loss(const MatD& x, std::span<const std::uint32_t> labels,
                std::vector<MatD>* wgrads = nullptr, std::vector<VecD>* bgrads = nullptr) const {
        const auto acts = forward(x);
        const MatD& z = acts.back();
        const auto n = static_cast<double>(x.rows());
        MatD delta(z.rows(), z.cols());
        double total = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            const double shift = z.row(r).maxCoeff();
            const Eigen::RowVectorXd e = (z.row(r).array() - shift).exp();
            const double sum = e.sum();
            total += shift + std::log(sum) - z(r, labels[static_cast<std::size_t>(r)]);
            delta.row(r) = e / sum;
            delta(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
        }
        if (wgrads && bgrads) {
            delta /= n;
            wgrads->assign(weights_.size(), {});
            bgrads->assign(weights_.size(), {});
            for (std::size_t l = weights_.size(); l-- > 0;) {
                const MatD& input = acts[l];
                (*wgrads)[l] = delta.transpose() * input;
                (*bgrads)[l] = delta.colwise().sum().transpose();
                if (l > 0) {
                    MatD back = delta * weights_[l];
                    delta = back.cwiseProduct((acts[l].array() > 0.0).matrix().cast<double>());
                }
            }
        }
        return total / n;
    }

    void step(const std::vector<MatD>& wgrads, const std::vector<VecD>& bgrads, AdamWState& state,
              double lr, double weight_decay) {
        std::vector<ParamSlot> slots;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            slots.push_back({"probe.W" + std::to_string(l),
                             {weights_[l].data(), static_cast<std::size_t>(weights_[l].size())},
                             {wgrads[l].data(), static_cast<std::size_t>(wgrads[l].size())}, true});
            slots.push_back({"probe.b" + std::to_string(l),
                             {biases_[l].data(), static_cast<std::size_t>(biases_[l].size())},
                             {bgrads[l].data(), static_cast<std::size_t>(bgrads[l].size())}, false});
        }
        adamw_step(slots, state, lr, weight_decay);
    }

private:
    // acts[0] = input, acts[l] = post-ReLU input of layer l, back() = logits
    std::vector<MatD> forward(const MatD& x) const {
        std::vector<MatD> acts{x};
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            MatD z = acts.back() * weights_[l].transpose();
            z.rowwise() += biases_[l].transpose();
            if (l + 1 < weights_.size()) z = z.cwiseMax(0.0);
            acts.push_back(std::move(z));
        }
        return acts;
    }

    std::vector<MatD> weights_;
    std::vector<VecD> biases_;
};

/// Trains a probe head on frozen train features and reports test top-k accuracy.
inline EvalReport linear_probe(const MatD& train_feats, std::span<const std::uint32_t> train_labels,
                               const MatD& test_feats, std::span<const std::uint32_t> test_labels,
                               std::size_t num_classes, const ProbeConfig& cfg,
                               std::span<const std::uint64_t> test_ids = {}) {
    detail::check_rows(train_feats, train_labels.size(), "linear_probe train");
    detail::check_rows(test_feats, test_labels.size(), "linear_probe test");
    if (train_feats.cols() != test_feats.cols()) throw ShapeError("linear_probe: dimension mismatch");
    for (auto l : train_labels) {
        if (l >= num_classes) throw DomainError("linear_probe: train label exceeds class count");
    }
    for (auto l : test_labels) {
        if (l >= num_classes) throw DomainError("linear_probe: test label exceeds class count");
    }
    for (std::size_t k : cfg.ks) {
        if (k == 0 || k > num_classes) throw DomainError("linear_probe: k out of range");
    }
    if (train_labels.empty() || cfg.batch_size == 0) throw DomainError("linear_probe: empty training set");

    ProbeHead head(static_cast<std::size_t>(train_feats.cols()), num_classes, cfg.layers, cfg.seed);
    AdamWState adam;
    EvalReport rep;
    rep.protocol = "linear" + std::to_string(cfg.layers);
    rep.train_loss.push_back(head.loss(train_feats, train_labels));

    std::vector<std::size_t> order(train_labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<MatD> wg;
    std::vector<VecD> bg;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng = make_rng(cfg.seed, Stream::probe, 1000 + epoch);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            MatD xb(static_cast<Eigen::Index>(end - start), train_feats.cols());
            std::vector<std::uint32_t> yb;
            for (std::size_t k = start; k < end; ++k) {
                xb.row(static_cast<Eigen::Index>(k - start)) = train_feats.row(static_cast<Eigen::Index>(order[k]));
                yb.push_back(train_labels[order[k]]);
            }
            head.loss(xb, yb, &wg, &bg);
            head.step(wg, bg, adam, cfg.lr, cfg.weight_decay);
        }
        rep.train_loss.push_back(head.loss(train_feats, train_labels));
    }

    const MatD logits = head.logits(test_feats);
    const std::size_t kmax = *std::max_element(cfg.ks.begin(), cfg.ks.end());
    const auto keys = detail::class_keys(num_classes);
    rep.ks = cfg.ks;
    std::vector<std::vector<char>> hits(test_labels.size());
    for (std::size_t s = 0; s < test_labels.size(); ++s) {
        const Eigen::RowVectorXd z = logits.row(static_cast<Eigen::Index>(s));
        const Eigen::RowVectorXd e = (z.array() - z.maxCoeff()).exp();
        const Eigen::RowVectorXd prob = e / e.sum();
        const std::vector<double> scores(prob.data(), prob.data() + prob.size());
        const auto order_s = rank_desc<std::uint32_t>(scores, keys, kmax);
        SampleRecord rec{test_ids.empty() ? s : test_ids[s], test_labels[s], {}, {}, {}};
        for (std::size_t c : order_s) {
            rec.top_classes.push_back(static_cast<std::uint32_t>(c));
            rec.top_scores.push_back(scores[c]);
        }
        for (std::size_t k : cfg.ks) {
            hits[s].push_back(std::find(order_s.begin(), order_s.begin() + static_cast<std::ptrdiff_t>(k),
                                        test_labels[s]) != order_s.begin() + static_cast<std::ptrdiff_t>(k));
        }
        rep.samples.push_back(std::move(rec));
    }
    detail::summarize(rep, test_labels, hits);
    return rep;
}

/// Encoder features of every cloud, one unit row per sample.
inline MatD encode_dataset(std::span<const PointCloud> data, const EncoderParams& params,
                           unsigned threads = 1) {
    std::vector<CloudView> views;
    views.reserve(data.size());
    for (const auto& pc : data) views.emplace_back(pc.points);
    return encode_batch<double>(views, params, threads);
}

inline std::string features_csv(std::span<const PointCloud> data, const MatD& features) {
    std::string out = "id,class_id";
    for (Eigen::Index k = 0; k < features.cols(); ++k) out += ",f_" + std::to_string(k);
    out += '\n';
    for (std::size_t s = 0; s < data.size(); ++s) {
        out += std::to_string(data[s].id) + "," + std::to_string(data[s].class_id);
        for (Eigen::Index k = 0; k < features.cols(); ++k) {
            out += "," + format_double(features(static_cast<Eigen::Index>(s), k));
        }
        out += '\n';
    }
    return out;
}

/// CSV columns id, class_id, f_0 .. f_{d-1}; one row per sample in dataset order.
inline void export_features(std::span<const PointCloud> data, const EncoderParams& params,
                            const std::filesystem::path& path, unsigned threads = 1) {
    write_file(path, features_csv(data, encode_dataset(data, params, threads)));
}

inline std::string metric_name(const EvalReport& rep, std::size_t k) {
    return (rep.protocol.starts_with("retrieval") ? "recall@" : "top") + std::to_string(k);
}

/// Schema: protocol, ks, overall{metric: value}, per_class[], samples[], train_loss[] (probe).
inline nlohmann::json report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["protocol"] = rep.protocol;
    j["ks"] = rep.ks;
    nlohmann::json overall = nlohmann::json::object();
    for (std::size_t n = 0; n < rep.ks.size(); ++n) overall[metric_name(rep, rep.ks[n])] = rep.accuracy[n];
    j["overall"] = overall;
    j["per_class"] = nlohmann::json::array();
    for (const auto& ca : rep.per_class) {
        nlohmann::json c{{"class", ca.class_id}, {"count", ca.count}};
        for (std::size_t n = 0; n < rep.ks.size(); ++n) c[metric_name(rep, rep.ks[n])] = ca.accuracy[n];
        j["per_class"].push_back(c);
    }
    j["samples"] = nlohmann::json::array();
    for (const auto& s : rep.samples) {
        nlohmann::json r{{"id", s.id},
                         {"true_class", s.true_class},
                         {"top_classes", s.top_classes},
                         {"top_scores", s.top_scores}};
        if (!s.top_ids.empty()) r["top_ids"] = s.top_ids;
        j["samples"].push_back(r);
    }
    if (!rep.train_loss.empty()) j["train_loss"] = rep.train_loss;
    return j;
}

/// Flat per-sample CSV: id, true_class, rank, class, score[, gallery_id].
inline std::string report_csv(const EvalReport& rep) {
    const bool gallery = rep.protocol.starts_with("retrieval");
    std::string out = gallery ? "id,true_class,rank,class,score,gallery_id\n" : "id,true_class,rank,class,score\n";
    for (const auto& s : rep.samples) {
        for (std::size_t r = 0; r < s.top_classes.size(); ++r) {
            out += std::to_string(s.id) + "," + std::to_string(s.true_class) + "," + std::to_string(r + 1) +
                   "," + std::to_string(s.top_classes[r]) + "," + format_double(s.top_scores[r]);
            if (gallery) out += "," + std::to_string(s.top_ids[r]);
            out += '\n';
        }
    }
    return out;
}

} // namespace mmx
