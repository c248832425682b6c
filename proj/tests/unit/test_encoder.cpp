#include <gtest/gtest.h>

#include <random>

#include "mmx/checkpoint.hpp"
#include "mmx/encoder.hpp"
#include "mmx/geometry.hpp"
#include "oracles.hpp"

using namespace mmx;

namespace {

EncoderParams random_params(std::uint64_t seed, std::size_t h, std::size_t d) {
    EncoderParams p = init_params(seed, h, d);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> g(0.0, 0.1);
    for (auto* b : {&p.b1, &p.b2, &p.b3}) {
        for (Eigen::Index k = 0; k < b->size(); ++k) (*b)(k) = g(rng);
    }
    return p;
}

} // namespace

TEST(Init, DeterministicZeroBiasHeStd) {
    const auto a = init_params(4, 256, 16);
    EXPECT_EQ(a, init_params(4, 256, 16));
    EXPECT_TRUE(a.b1.isZero(0.0));
    EXPECT_TRUE(a.b2.isZero(0.0));
    EXPECT_TRUE(a.b3.isZero(0.0));
    const double mean = a.W1.mean();
    const double sd = std::sqrt((a.W1.array() - mean).square().sum() / static_cast<double>(a.W1.size() - 1));
    EXPECT_NEAR(sd, std::sqrt(2.0 / 3.0), 0.15 * std::sqrt(2.0 / 3.0));
    EXPECT_THROW(init_params(0, 3, 8), DomainError);
    EXPECT_THROW(init_params(0, 8, 3), DomainError);
}

TEST(Forward, PermutationInvariantAndUnitNorm) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const auto pc = gen_shape(static_cast<std::uint32_t>(trial % 8), 32 + trial, rng(), 0.02);
        const auto p = random_params(rng(), 16, 12);
        const VecD f = encode<double>(pc.points, p);
        EXPECT_NEAR(f.norm(), 1.0, 1e-12);
        auto shuffled = pc.points;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const VecD g = encode<double>(shuffled, p);
        for (Eigen::Index k = 0; k < f.size(); ++k) EXPECT_NEAR(f(k), g(k), 1e-12);
    }
}

TEST(Forward, DuplicatedPointsGiveSameFeature) {
    const auto pc = gen_shape(4, 64, 3, 0.0);
    auto doubled = pc.points;
    doubled.insert(doubled.end(), pc.points.begin(), pc.points.end());
    const auto p = random_params(7, 16, 8);
    EXPECT_EQ(encode<double>(pc.points, p), encode<double>(doubled, p));
}

TEST(Forward, PoolTieGoesToSmallestIndex) {
    // every point identical: all channels tie, winners must be point 0
    std::vector<Point3> pts(5, Point3{0.3, -0.2, 0.5});
    const auto p = random_params(1, 8, 8);
    const auto out = forward<double>(pts, p);
    for (auto w : out.tape.winners) EXPECT_EQ(w, 0);
}

TEST(Forward, DeadNetworkIsDegenerate) {
    auto p = EncoderParams::zeros(8, 8);
    const auto pc = gen_shape(0, 16, 0, 0.0);
    EXPECT_THROW(encode<double>(pc.points, p), DegenerateError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    const auto pc = gen_shape(2, 16, 5, 0.01);
    const auto p = random_params(2, 8, 8);
    const auto out = forward<double>(pc.points, p);
    const auto g = backward(out.tape, p, VecD(VecD::Zero(8)), true);
    for (auto t : tensors(g.params)) {
        for (double v : t) EXPECT_EQ(v, 0.0);
    }
    EXPECT_TRUE(g.input->isZero(0.0));
}

TEST(Backward, B3IsNormalizationJacobianTimesUpstream) {
    std::mt19937_64 rng(12);
    const auto pc = gen_shape(5, 16, 9, 0.01);
    const auto p = random_params(3, 8, 8);
    const auto out = forward<double>(pc.points, p);
    const VecD u = oracle::unit_rows(1, 8, rng).row(0).transpose();
    const auto g = backward(out.tape, p, u);
    const VecD y = out.tape.y;
    const double r = y.norm();
    const VecD yhat = y / r;
    const VecD expect = (u - yhat * yhat.dot(u)) / r;
    for (Eigen::Index k = 0; k < 8; ++k) EXPECT_NEAR(g.params.b3(k), expect(k), 1e-15);
    // and against central differences on b3
    for (Eigen::Index k = 0; k < 8; ++k) {
        auto plus = p, minus = p;
        plus.b3(k) += 1e-6;
        minus.b3(k) -= 1e-6;
        const double fd = (encode<double>(pc.points, plus).dot(u) - encode<double>(pc.points, minus).dot(u)) / 2e-6;
        EXPECT_NEAR(g.params.b3(k), fd, 1e-8);
    }
}

TEST(Backward, InputGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pc = gen_shape(static_cast<std::uint32_t>(trial % 8), 16, rng(), 0.05);
        const auto p = random_params(rng(), 8, 8);
        const VecD u = oracle::unit_rows(1, 8, rng).row(0).transpose();
        const auto out = forward<long double>(pc.points, p.cast<long double>());
        const auto g = backward(out.tape, p.cast<long double>(), Vec<long double>(u.cast<long double>()), true);
        for (std::size_t i = 0; i < pc.size(); ++i) {
            for (int a = 0; a < 3; ++a) {
                auto plus = pc.points, minus = pc.points;
                plus[i][a] += 1e-6;
                minus[i][a] -= 1e-6;
                const long double fd = (encode<long double>(plus, p.cast<long double>()).dot(u.cast<long double>()) -
                                        encode<long double>(minus, p.cast<long double>()).dot(u.cast<long double>())) /
                                       2e-6L;
                const long double an = (*g.input)(static_cast<Eigen::Index>(i), a);
                EXPECT_LE(std::abs(static_cast<double>(an - fd)), 1e-7 * std::max(1.0, std::abs(static_cast<double>(fd))));
            }
        }
    }
}

TEST(Checkpoint, RoundtripAndErrors) {
    const auto p = random_params(5, 8, 6);
    const auto bytes = encode_checkpoint(p, -1.25, 77);
    const auto ck = decode_checkpoint(bytes);
    EXPECT_EQ(ck.params, p);
    EXPECT_EQ(ck.rho, -1.25);
    EXPECT_EQ(ck.step, 77u);
    EXPECT_EQ(encode_checkpoint(ck.params, ck.rho, ck.step), bytes);

    try {
        decode_checkpoint(bytes.substr(0, bytes.size() - 5));
        FAIL();
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(std::to_string(bytes.size())), std::string::npos) << msg;
        EXPECT_NE(msg.find(std::to_string(bytes.size() - 5)), std::string::npos) << msg;
    }
    auto bad = bytes;
    bad[1] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);

    const auto path = std::filesystem::temp_directory_path() / "mmx_test_ck.mmck";
    save_checkpoint(p, 0.5, 3, path);
    EXPECT_EQ(load_checkpoint(path, 8, 6).params, p);
    EXPECT_THROW(load_checkpoint(path, 16, 6), ShapeError);
    EXPECT_THROW(load_checkpoint(path, 8, 8), ShapeError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), IoError);
}
