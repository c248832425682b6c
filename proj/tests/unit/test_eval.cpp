#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "mmx/dataset.hpp"
#include "mmx/eval.hpp"
#include "oracles.hpp"

using namespace mmx;

namespace {

MatD quantized_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    // few distinct values, so exact score ties are common
    std::uniform_int_distribution<int> q(-2, 2);
    MatD X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        do {
            for (Eigen::Index c = 0; c < X.cols(); ++c) X(r, c) = q(rng);
        } while (X.row(r).squaredNorm() == 0.0);
    }
    return X;
}

void expect_report_invariants(const EvalReport& rep, std::size_t n) {
    for (std::size_t k = 1; k < rep.accuracy.size(); ++k) EXPECT_LE(rep.accuracy[k - 1], rep.accuracy[k]);
    for (double a : rep.accuracy) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
    for (std::size_t m = 0; m < rep.ks.size(); ++m) {
        double weighted = 0.0;
        std::size_t total = 0;
        for (const auto& ca : rep.per_class) {
            weighted += ca.accuracy[m] * static_cast<double>(ca.count);
            total += ca.count;
        }
        EXPECT_EQ(total, n);
        EXPECT_NEAR(weighted / static_cast<double>(total), rep.accuracy[m], 1e-12);
    }
    for (const auto& s : rep.samples) {
        for (double v : s.top_scores) {
            EXPECT_GE(v, -1.0 - 1e-12);
            EXPECT_LE(v, 1.0 + 1e-12);
        }
    }
}

const std::vector<std::size_t> kKs{1, 3, 5};

} // namespace

TEST(ZeroShot, SelfSimilarityIsPerfect) {
    const auto m = build_model(1, 8, 32, 0.1);
    std::vector<std::uint32_t> labels;
    MatD feats(40, 32);
    for (std::uint32_t k = 0; k < 40; ++k) {
        labels.push_back(k % 8);
        feats.row(k) = m.anchors.row(k % 8);
    }
    const auto rep = zero_shot(feats, labels, m.anchors, kKs);
    EXPECT_EQ(rep.accuracy[0], 1.0);
    expect_report_invariants(rep, 40);
}

TEST(ZeroShot, OrthogonalFeaturesFollowTieBreak) {
    MatD classes = MatD::Zero(8, 16);
    for (Eigen::Index c = 0; c < 8; ++c) classes(c, c) = 1.0;
    MatD feats = MatD::Zero(30, 16);
    std::vector<std::uint32_t> labels;
    std::size_t zeros = 0;
    for (Eigen::Index k = 0; k < 30; ++k) {
        feats(k, 8 + k % 8) = 1.0;
        labels.push_back(static_cast<std::uint32_t>((k * 5) % 8));
        zeros += labels.back() == 0;
    }
    const auto rep = zero_shot(feats, labels, classes, kKs);
    EXPECT_EQ(rep.accuracy[0], static_cast<double>(zeros) / 30.0);
    for (const auto& s : rep.samples) EXPECT_EQ(s.top_classes, (std::vector<std::uint32_t>{0, 1, 2, 3, 4}));
}

TEST(ZeroShot, MatchesSortOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 1 + rng() % 200, d = 3 + rng() % 6;
        const std::uint32_t C = 5 + static_cast<std::uint32_t>(rng() % 4);
        const MatD feats = trial % 2 ? quantized_rows(n, d, rng) : oracle::unit_rows(n, d, rng);
        const MatD classes = trial % 2 ? quantized_rows(C, d, rng) : oracle::unit_rows(C, d, rng);
        std::vector<std::uint32_t> labels;
        for (std::size_t k = 0; k < n; ++k) labels.push_back(static_cast<std::uint32_t>(rng() % C));
        const auto rep = zero_shot(feats, labels, classes, kKs);
        std::vector<std::uint32_t> keys(C);
        std::iota(keys.begin(), keys.end(), 0u);
        std::vector<double> hits(3, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
            std::vector<double> scores;
            for (std::uint32_t c = 0; c < C; ++c) scores.push_back(oracle::plain_dot(feats, static_cast<Eigen::Index>(s), classes, c));
            const auto order = oracle::sort_ranking(scores, keys);
            for (std::size_t r = 0; r < 5; ++r) ASSERT_EQ(rep.samples[s].top_classes[r], order[r]);
            for (std::size_t m = 0; m < 3; ++m) {
                hits[m] += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kKs[m]), labels[s]) !=
                           order.begin() + static_cast<std::ptrdiff_t>(kKs[m]);
            }
        }
        for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(rep.accuracy[m], hits[m] / static_cast<double>(n));
    }
}

TEST(ZeroShot, RotationInvariant) {
    std::mt19937_64 rng(4);
    const MatD feats = oracle::unit_rows(300, 12, rng);
    const MatD classes = oracle::unit_rows(8, 12, rng);
    std::vector<std::uint32_t> labels;
    for (int k = 0; k < 300; ++k) labels.push_back(static_cast<std::uint32_t>(rng() % 8));
    const Eigen::MatrixXd A = oracle::unit_rows(12, 12, rng);
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();
    const auto a = zero_shot(feats, labels, classes, kKs);
    const auto b = zero_shot(MatD(feats * Q), labels, MatD(classes * Q), kKs);
    EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(ZeroShot, Errors) {
    const MatD f = MatD::Identity(3, 4), c = MatD::Identity(2, 4);
    const std::vector<std::uint32_t> ok{0, 1, 0}, bad{0, 2, 0};
    EXPECT_THROW(zero_shot(f, bad, c, std::vector<std::size_t>{1}), DomainError);
    EXPECT_THROW(zero_shot(f, ok, c, std::vector<std::size_t>{3}), DomainError);
    EXPECT_THROW(zero_shot(f, ok, MatD(MatD::Identity(2, 3)), std::vector<std::size_t>{1}), ShapeError);
    EXPECT_THROW(zero_shot(f, std::vector<std::uint32_t>{0}, c, std::vector<std::size_t>{1}), ShapeError);
}

TEST(Probe, OneHotFeaturesAreLearned) {
    MatD train = MatD::Zero(64, 8), test = MatD::Zero(16, 8);
    std::vector<std::uint32_t> ytr, yte;
    for (Eigen::Index k = 0; k < 64; ++k) {
        train(k, k % 8) = 1.0;
        ytr.push_back(static_cast<std::uint32_t>(k % 8));
    }
    for (Eigen::Index k = 0; k < 16; ++k) {
        test(k, k % 8) = 1.0;
        yte.push_back(static_cast<std::uint32_t>(k % 8));
    }
    ProbeConfig cfg;
    cfg.epochs = 50;
    cfg.lr = 1e-2;
    const auto rep = linear_probe(train, ytr, test, yte, 8, cfg);
    EXPECT_EQ(rep.accuracy[0], 1.0);
    EXPECT_EQ(rep.train_loss.size(), 51u);
    EXPECT_LE(rep.train_loss.back(), rep.train_loss.front());
    expect_report_invariants(rep, 16);
}

TEST(Probe, LayersZeroEpochsAndErrors) {
    std::mt19937_64 rng(5);
    const MatD tr = oracle::unit_rows(40, 6, rng), te = oracle::unit_rows(10, 6, rng);
    std::vector<std::uint32_t> ytr, yte;
    for (int k = 0; k < 40; ++k) ytr.push_back(static_cast<std::uint32_t>(k % 4));
    for (int k = 0; k < 10; ++k) yte.push_back(static_cast<std::uint32_t>(k % 4));
    ProbeConfig cfg;
    cfg.ks = {1, 3};
    for (int layers : {1, 2, 3}) {
        cfg.layers = layers;
        cfg.epochs = 5;
        const auto rep = linear_probe(tr, ytr, te, yte, 4, cfg);
        EXPECT_EQ(rep.protocol, "linear" + std::to_string(layers));
        expect_report_invariants(rep, 10);
        cfg.epochs = 0;
        const auto a = linear_probe(tr, ytr, te, yte, 4, cfg);
        const auto b = linear_probe(tr, ytr, te, yte, 4, cfg);
        EXPECT_EQ(a.accuracy, b.accuracy);
        EXPECT_EQ(a.train_loss.size(), 1u);
    }
    cfg.layers = 4;
    EXPECT_THROW(linear_probe(tr, ytr, te, yte, 4, cfg), DomainError);
    cfg.layers = 1;
    EXPECT_THROW(linear_probe(tr, ytr, te, yte, 3, cfg), DomainError);  // labels reach class 3
}

TEST(Probe, SeparableLossDecreases) {
    const auto m = build_model(8, 8, 32, 0.1);
    MatD tr(200, 32), te(80, 32);
    std::vector<std::uint32_t> ytr, yte;
    for (int k = 0; k < 200; ++k) {
        ytr.push_back(static_cast<std::uint32_t>(k % 8));
        tr.row(k) = embed_image(m, ytr.back(), static_cast<std::uint64_t>(k)).transpose();
    }
    for (int k = 0; k < 80; ++k) {
        yte.push_back(static_cast<std::uint32_t>(k % 8));
        te.row(k) = embed_image(m, yte.back(), static_cast<std::uint64_t>(1000 + k)).transpose();
    }
    ProbeConfig cfg;
    cfg.epochs = 30;
    const auto rep = linear_probe(tr, ytr, te, yte, 8, cfg);
    EXPECT_LT(rep.train_loss.back(), rep.train_loss.front());
    EXPECT_GE(rep.accuracy[0], 0.9);
}

TEST(Retrieval, SelfRankedFirstAndAnchors) {
    std::mt19937_64 rng(6);
    const MatD g = oracle::unit_rows(50, 8, rng);
    std::vector<std::uint64_t> ids(50);
    std::iota(ids.begin(), ids.end(), std::uint64_t{100});
    std::vector<std::uint32_t> labels(50);
    for (std::size_t k = 0; k < 50; ++k) labels[k] = static_cast<std::uint32_t>(k % 5);
    const auto rep = retrieval(g, ids, labels, g, ids, labels, 1, false);
    for (std::size_t k = 0; k < 50; ++k) EXPECT_EQ(rep.samples[k].top_ids[0], ids[k]);
    EXPECT_EQ(rep.accuracy[0], 1.0);

    const auto excl = retrieval(g, ids, labels, g, ids, labels, 3, true);
    for (std::size_t k = 0; k < 50; ++k) {
        for (auto id : excl.samples[k].top_ids) EXPECT_NE(id, ids[k]);
    }

    MatD anchors = MatD::Zero(6, 6);
    for (Eigen::Index k = 0; k < 6; ++k) anchors(k, k) = 1.0;
    const std::vector<std::uint64_t> aid{0, 1, 2, 3, 4, 5};
    const std::vector<std::uint32_t> alab{0, 1, 2, 3, 4, 5};
    EXPECT_EQ(retrieval(anchors, aid, alab, anchors, aid, alab, 1, false).accuracy[0], 1.0);
}

TEST(Retrieval, MatchesSortOracleAndNests) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t nq = 20 + rng() % 30, ng = 100 + rng() % 900;
        const MatD q = trial % 2 ? quantized_rows(nq, 4, rng) : oracle::unit_rows(nq, 4, rng);
        const MatD g = trial % 2 ? quantized_rows(ng, 4, rng) : oracle::unit_rows(ng, 4, rng);
        std::vector<std::uint64_t> qid(nq), gid(ng);
        std::vector<std::uint32_t> ql(nq), gl(ng);
        for (std::size_t k = 0; k < nq; ++k) {
            qid[k] = rng() % 5000;
            ql[k] = static_cast<std::uint32_t>(rng() % 6);
        }
        std::vector<std::uint64_t> pool(5000);
        std::iota(pool.begin(), pool.end(), std::uint64_t{0});
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t k = 0; k < ng; ++k) {
            gid[k] = pool[k];
            gl[k] = static_cast<std::uint32_t>(rng() % 6);
        }
        double prev = 0.0;
        for (std::size_t k : {1u, 2u, 5u, 10u}) {
            const auto rep = retrieval(q, qid, ql, g, gid, gl, k, false);
            EXPECT_GE(rep.accuracy[0], prev);
            prev = rep.accuracy[0];
            for (std::size_t s = 0; s < nq; ++s) {
                std::vector<double> scores;
                for (std::size_t j = 0; j < ng; ++j) {
                    scores.push_back(oracle::plain_dot(q, static_cast<Eigen::Index>(s), g, static_cast<Eigen::Index>(j)));
                }
                const auto order = oracle::sort_ranking(scores, gid);
                for (std::size_t r = 0; r < k; ++r) ASSERT_EQ(rep.samples[s].top_ids[r], gid[order[r]]);
            }
        }
    }
}

TEST(Retrieval, KOutOfRange) {
    const MatD g = MatD::Identity(3, 3);
    const std::vector<std::uint64_t> ids{1, 2, 3};
    const std::vector<std::uint32_t> l{0, 1, 2};
    EXPECT_THROW(retrieval(g, ids, l, g, ids, l, 0, false), DomainError);
    EXPECT_THROW(retrieval(g, ids, l, g, ids, l, 4, false), DomainError);
    EXPECT_THROW(retrieval(g, ids, l, g, ids, l, 3, true), DomainError);
    EXPECT_NO_THROW(retrieval(g, ids, l, g, ids, l, 2, true));
}

TEST(Export, RowsNormsDeterminism) {
    const auto data = generate_dataset({4, 8, 10, 64, 0.01, 500});
    const auto p = init_params(3, 16, 8);
    const auto dir = std::filesystem::temp_directory_path();
    export_features(data, p, dir / "mmx_feat_a.csv");
    export_features(data, p, dir / "mmx_feat_b.csv", 3);
    const auto a = read_file(dir / "mmx_feat_a.csv");
    EXPECT_EQ(a, read_file(dir / "mmx_feat_b.csv"));
    std::istringstream in(a);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "id,class_id,f_0,f_1,f_2,f_3,f_4,f_5,f_6,f_7");
    int rows = 0;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string cell;
        std::getline(cells, cell, ',');
        EXPECT_EQ(std::stoull(cell), data[static_cast<std::size_t>(rows)].id);
        std::getline(cells, cell, ',');
        double sq = 0.0;
        while (std::getline(cells, cell, ',')) sq += std::stod(cell) * std::stod(cell);
        EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
        ++rows;
    }
    EXPECT_EQ(rows, 10);
    std::filesystem::remove(dir / "mmx_feat_a.csv");
    std::filesystem::remove(dir / "mmx_feat_b.csv");
    EXPECT_THROW(export_features(data, p, "/nonexistent-dir/x.csv"), IoError);
}

TEST(Report, JsonSchemaAndCsv) {
    const MatD f = MatD::Identity(4, 4);
    const std::vector<std::uint32_t> labels{0, 1, 2, 3};
    const std::vector<std::uint64_t> ids{10, 11, 12, 13};
    const auto rep = zero_shot(f, labels, f, std::vector<std::size_t>{1, 3}, ids);
    const auto j = report_json(rep);
    EXPECT_EQ(j["protocol"], "zeroshot");
    EXPECT_EQ(j["overall"]["top1"], 1.0);
    EXPECT_EQ(j["per_class"].size(), 4u);
    EXPECT_EQ(j["samples"][2]["id"], 12);
    EXPECT_EQ(j["samples"][2]["top_classes"][0], 2);
    const auto csv = report_csv(rep);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,true_class,rank,class,score");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 3);

    auto ret = retrieval(f, ids, labels, f, ids, labels, 2, true);
    ret.protocol = "retrieval-point";
    const auto rj = report_json(ret);
    EXPECT_EQ(rj["overall"]["recall@2"], ret.accuracy[0]);
    const auto rcsv = report_csv(ret);
    EXPECT_EQ(rcsv.substr(0, rcsv.find('\n')), "id,true_class,rank,class,score,gallery_id");
}
