#include <gtest/gtest.h>

#include "mmx/dataset.hpp"
#include "mmx/frozen.hpp"

using namespace mmx;

namespace {

std::vector<SampleRef> refs(std::size_t n, std::uint32_t classes) {
    std::vector<SampleRef> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back({k * 3 + 1, static_cast<std::uint32_t>(k % classes)});
    return out;
}

} // namespace

TEST(Model, DeterministicUnitSeparated) {
    const auto a = build_model(11, 8, 32, 0.1);
    const auto b = build_model(11, 8, 32, 0.1);
    EXPECT_EQ(a.anchors, b.anchors);
    for (Eigen::Index k = 0; k < a.anchors.rows(); ++k) EXPECT_NEAR(a.anchors.row(k).norm(), 1.0, 1e-12);
    for (Eigen::Index i = 0; i < 8; ++i) {
        for (Eigen::Index j = 0; j < 8; ++j) {
            if (i != j) {
                EXPECT_LE(a.anchors.row(i).dot(a.anchors.row(j)), 0.5);
            }
        }
    }
}

TEST(Model, SeparationHoldsAcrossSeedsAndSmallDims) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        for (std::size_t d : {8u, 16u, 32u}) {
            const auto m = build_model(seed, 8, d, 0.1);
            EXPECT_LE(max_offdiagonal_dot(m.anchors), 0.5);
        }
    }
}

TEST(Model, Errors) {
    EXPECT_THROW(build_model(0, 8, 7, 0.1), DomainError);
    EXPECT_THROW(build_model(0, 1, 32, 0.1), DomainError);
    EXPECT_THROW(build_model(0, 8, 32, -1.0), DomainError);
    // 40 classes cannot keep pairwise dots below 0.5 in 8 dimensions
    EXPECT_THROW(build_model(0, 40, 8, 0.1), Error);
}

TEST(Embed, TextIsAnchor) {
    const auto m = build_model(3, 8, 32, 0.1);
    EXPECT_EQ(embed_text(m, 3), VecD(m.anchors.row(3).transpose()));
    EXPECT_EQ(embed_text(m, 3), embed_text(m, 3));
    EXPECT_THROW(embed_text(m, 8), DomainError);
}

TEST(Embed, ImageNoiseless) {
    const auto m = build_model(3, 8, 32, 0.0);
    for (std::uint32_t c = 0; c < 8; ++c) {
        const VecD a = embed_image(m, c, 99), t = embed_text(m, c);
        for (Eigen::Index k = 0; k < a.size(); ++k) EXPECT_NEAR(a(k), t(k), 1e-15);
    }
    EXPECT_THROW(embed_image(m, 9, 0), DomainError);
}

TEST(Embed, ImageNearestAnchorMonteCarlo) {
    const auto m = build_model(5, 8, 32, 0.1);
    int correct = 0;
    const int trials = 10000;
    for (int k = 0; k < trials; ++k) {
        const auto cls = static_cast<std::uint32_t>(k % 8);
        const VecD img = embed_image(m, cls, static_cast<std::uint64_t>(k));
        ASSERT_NEAR(img.norm(), 1.0, 1e-12);
        double best = -2.0;
        Eigen::Index arg = -1;
        for (Eigen::Index c = 0; c < 8; ++c) {
            const double s = img.dot(m.anchors.row(c).transpose());
            if (s > best) {
                best = s;
                arg = c;
            }
        }
        correct += arg == cls;
    }
    EXPECT_GE(correct, trials * 99 / 100);
}

TEST(Precache, CardinalityDeterminismAndText) {
    const auto m = build_model(1, 8, 16, 0.1);
    const auto samples = refs(100, 8);
    const auto text = precache(samples, m, Modality::text);
    const auto image = precache(samples, m, Modality::image);
    EXPECT_EQ(text.entries.size(), 100u);
    EXPECT_EQ(image, precache(samples, m, Modality::image));
    EXPECT_EQ(encode_cache(image), encode_cache(precache(samples, m, Modality::image)));

    std::vector<SampleRef> fives;
    for (std::uint64_t k = 0; k < 10; ++k) fives.push_back({k, 5});
    for (const auto& [id, v] : precache(fives, m, Modality::text).entries) EXPECT_EQ(v, embed_text(m, 5));
}

TEST(Precache, Errors) {
    const auto m = build_model(1, 8, 16, 0.1);
    std::vector<SampleRef> dup{{1, 0}, {2, 1}, {1, 2}};
    EXPECT_THROW(precache(dup, m, Modality::text), CacheError);
    EXPECT_THROW(precache(refs(3, 8), m, Modality::point), DomainError);
    EXPECT_THROW(precache(refs(3, 8), m, Modality::image, std::vector<std::uint64_t>{1}), DomainError);
    const auto c = precache(refs(3, 8), m, Modality::text);
    EXPECT_THROW(c.at(999), CacheError);
    EXPECT_THROW(parse_modality("audio"), DomainError);
}

TEST(CacheFormat, RoundtripBitExact) {
    const auto m = build_model(2, 6, 24, 0.3);
    const auto c = precache(refs(57, 6), m, Modality::image);
    const auto bytes = encode_cache(c);
    const auto back = decode_cache(bytes);
    EXPECT_EQ(back, c);
    EXPECT_EQ(encode_cache(back), bytes);
    EXPECT_EQ(bytes.substr(0, 4), "MMEC");
    // header 4+2+1+4+4, then (8 + 24*8) bytes per record
    EXPECT_EQ(bytes.size(), 15u + 57u * (8u + 24u * 8u));
}

TEST(CacheFormat, CorruptionRejectedWithOffsets) {
    const auto m = build_model(2, 4, 8, 0.1);
    const auto c = precache(refs(4, 4), m, Modality::text);
    const auto bytes = encode_cache(c);
    auto expect_offset = [](const std::string& b, std::uint64_t offset) {
        try {
            decode_cache(b);
            ADD_FAILURE() << "accepted corrupt cache";
        } catch (const FormatError& e) {
            EXPECT_EQ(e.offset(), offset) << e.what();
        }
    };
    auto bad = bytes;
    bad[0] = 'Z';
    expect_offset(bad, 0);
    bad = bytes;
    bad[4] = 2;
    expect_offset(bad, 4);
    bad = bytes;
    bad[6] = 7;  // modality code
    expect_offset(bad, 6);
    EXPECT_THROW(decode_cache(bytes.substr(0, bytes.size() - 1)), FormatError);

    // scale the first vector to norm 0.9
    auto scaled = c;
    scaled.entries.begin()->second *= 0.9;
    try {
        decode_cache(encode_cache(scaled));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("unit"), std::string::npos);
        EXPECT_EQ(e.offset(), 15u);
    }
}
