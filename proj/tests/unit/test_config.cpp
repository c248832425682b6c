#include <gtest/gtest.h>

#include "mmx/config.hpp"

using namespace mmx;

namespace {

std::string error_of(std::string_view text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

} // namespace

TEST(Config, Defaults) {
    const TrainConfig c;
    EXPECT_EQ(c.batch_size, 200u);
    EXPECT_EQ(c.lr0, 1e-3);
    EXPECT_EQ(c.lr_gamma, 0.955);
    EXPECT_EQ(c.beta, 1.0);
    EXPECT_EQ(c.epochs_stage1, 30u);
    EXPECT_EQ(c.epochs_stage2, 30u);
    EXPECT_TRUE(c.renormalize_mixed);
    EXPECT_EQ(c.mix_mode, MixMode::fm_im);
    EXPECT_EQ(c.stage_mode, StageMode::two);
    EXPECT_NEAR(c.temperature().tau(), 0.07, 1e-15);
    EXPECT_NO_THROW(validate(c));
}

TEST(Config, ParsesAllKeysAndRoundtrips) {
    const auto c = parse_config(R"(
# comment line
seed = 17
data.num_classes = 5
data.points_per_cloud = 128   # trailing comment
data.fps_points = 64
data.train_size = 100
data.eval_size = 20
data.jitter = 0.02
data.sigma_image = 0.05
model.dim = 16
model.hidden = 24
train.batch_size = 10
train.epochs_stage1 = 3
train.epochs_stage2 = 4
train.lr0 = 0.002
train.lr_gamma = 0.9
train.weight_decay = 0
train.stage_mode = one
mix.mode = im
mix.beta = 0.4
mix.renormalize = false
loss.terms = text,point
loss.tau_init = 0.1
loss.tau_min = 0.02
loss.tau_max = 50
loss.literal_eq4 = true
)");
    EXPECT_EQ(c.seed, 17u);
    EXPECT_EQ(c.num_classes, 5u);
    EXPECT_EQ(c.fps_points, 64u);
    EXPECT_EQ(c.hidden, 24u);
    EXPECT_EQ(c.stage_mode, StageMode::one);
    EXPECT_EQ(c.mix_mode, MixMode::im);
    EXPECT_FALSE(c.renormalize_mixed);
    EXPECT_EQ(c.loss_terms, (LossTerms{true, false, true}));
    EXPECT_TRUE(c.literal_eq4);
    EXPECT_EQ(c.tau_max, 50.0);
    EXPECT_EQ(parse_config(to_text(c)), c);
    EXPECT_EQ(parse_config(to_text(TrainConfig{})), TrainConfig{});
}

TEST(Config, Errors) {
    EXPECT_NE(error_of("seed = 1\nbogus.key = 3\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("seed = 1\nseed = 2\n").find("duplicate"), std::string::npos);
    EXPECT_NE(error_of("seed 1\n").find("line 1"), std::string::npos);
    EXPECT_FALSE(error_of("data.fps_points = 512\n").empty());
    EXPECT_FALSE(error_of("train.batch_size = 1\n").empty());
    EXPECT_FALSE(error_of("mix.mode = both\n").empty());
    EXPECT_FALSE(error_of("mix.beta = 0\n").empty());
    EXPECT_FALSE(error_of("train.lr_gamma = 1.5\n").empty());
    EXPECT_FALSE(error_of("model.dim = abc\n").empty());
    EXPECT_FALSE(error_of("loss.tau_init = 1000\n").empty());
    EXPECT_FALSE(error_of("loss.terms = \n").empty());
    EXPECT_FALSE(error_of("seed = -3\n").empty());
    EXPECT_FALSE(error_of("mix.renormalize = maybe\n").empty());
    EXPECT_THROW(load_config("/nonexistent/config.txt"), IoError);
}
