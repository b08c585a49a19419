#include <set>

#include "prvql/model.hpp"
#include "test_util.hpp"

namespace prvql {
namespace {

using test::expect_bit_equal;

ModelConfig small_config(std::int64_t stages) {
    ModelConfig c;
    c.stages = stages;
    c.frame_side = 32;
    c.query_side = 32;
    c.patch = 8;
    c.channels = 8;
    c.backbone_depth = 1;
    c.heads = 2;
    c.max_frames = 4;
    c.window = 1;
    c.tau = 0.3;
    c.top_n = 2;
    c.roi_pool = 2;
    c.head_hidden = 8;
    return c;
}

struct Inputs {
    Tensor query, frames;
};

Inputs random_inputs(std::int64_t L, std::uint64_t seed, std::int64_t side = 32) {
    Rng rng(seed);
    std::vector<double> q(static_cast<std::size_t>(side * side * 3)), f(static_cast<std::size_t>(L * side * side * 3));
    for (auto& v : q) v = rng.uniform();
    for (auto& v : f) v = rng.uniform();
    return {Tensor::from_values({side, side, 3}, q), Tensor::from_values({L, side, side, 3}, f)};
}

TEST(ModelConfigTest, DefaultsAndValidation) {
    ModelConfig c;
    EXPECT_EQ(c.stages, 3);
    EXPECT_DOUBLE_EQ(c.tau, 0.7);
    EXPECT_EQ(c.top_n, 3);
    EXPECT_EQ(c.roi_pool, 5);
    EXPECT_DOUBLE_EQ(c.alpha, 0.5);
    EXPECT_DOUBLE_EQ(c.beta, 0.1);
    EXPECT_EQ(c.grid(), 12);
    EXPECT_EQ(c.down_grid(), 6);
    EXPECT_EQ(c.anchors.per_cell(), 12);
    EXPECT_NO_THROW(c.validate());

    auto bad = [](auto mutate) {
        ModelConfig m;
        mutate(m);
        EXPECT_THROW(m.validate(), ConfigError);
    };
    bad([](ModelConfig& m) { m.stages = 0; });
    bad([](ModelConfig& m) { m.frame_side = 100; });
    bad([](ModelConfig& m) { m.channels = 63; });
    bad([](ModelConfig& m) { m.tau = 1.0; });
    bad([](ModelConfig& m) { m.alpha = -0.1; });
    bad([](ModelConfig& m) { m.beta = 1.5; });
    bad([](ModelConfig& m) { m.downsample = 5; });
}

TEST(ModelConfigTest, JsonRoundTripAndStrictness) {
    ModelConfig c = small_config(2);
    c.qfr_mode = QfrMode::kConcatenation;
    c.anchors.scales = {0.1, 0.2};
    const auto back = model_config_from_json(model_config_to_json(c));
    EXPECT_EQ(model_config_to_json(back), model_config_to_json(c));
    EXPECT_EQ(back.qfr_mode, QfrMode::kConcatenation);
    EXPECT_EQ(model_config_from_json(R"({"stages": 1})").stages, 1);
    EXPECT_THROW(model_config_from_json(R"({"stage": 1})"), ConfigError);
    EXPECT_THROW(model_config_from_json(R"({"stages": "3"})"), ConfigError);
    EXPECT_THROW(model_config_from_json(R"({"stages": 1.5})"), ConfigError);
    EXPECT_THROW(model_config_from_json(R"({"stages": 0})"), ConfigError);
    EXPECT_THROW(model_config_from_json("{not json"), ParseError);
    EXPECT_THROW(model_config_from_json("[1]"), ConfigError);
}

TEST(BackboneTest, SharedWeightsAndGrid) {
    DTypeScope scope(DType::kFloat64);
    ModelConfig c = small_config(1);
    ParameterStore store(1);
    Backbone backbone(store, c);
    auto in = random_inputs(2, 2);
    auto stacked = ops::stack(std::vector<Tensor>{in.query, in.query}, 0);
    auto out = backbone(stacked);
    EXPECT_EQ(out.shape(), (Shape{2, 16, 8}));
    expect_bit_equal(ops::slice(out, 0, 0, 1), ops::slice(out, 0, 1, 2));
    EXPECT_THROW(backbone(Tensor::zeros({1, 30, 30, 3})), ConfigError);
}

TEST(BackboneTest, ZeroImageWithZeroBiasGivesReplicatedEmbedding) {
    DTypeScope scope(DType::kFloat64);
    ModelConfig c = small_config(1);
    c.backbone_depth = 0;
    ParameterStore store(3);
    Backbone backbone(store, c);
    auto* pos = backbone.pos.mutable_data<double>();
    std::fill(pos, pos + backbone.pos.numel(), 0.0);
    auto out = backbone(Tensor::zeros({1, 32, 32, 3}));
    for (std::int64_t t = 1; t < 16; ++t)
        for (std::int64_t ch = 0; ch < 8; ++ch) EXPECT_EQ(out.at({0, t, ch}), out.at({0, 0, ch}));
}

TEST(ModelTest, StageCountsWithThreeStages) {
    DTypeScope scope(DType::kFloat64);
    ModelConfig c = small_config(3);
    c.tau = 0.01;
    PrvqlModel model(c, 4);
    auto in = random_inputs(3, 5);
    auto out = model.forward(in.query, in.frames);
    ASSERT_EQ(out.stages.size(), 3u);
    EXPECT_EQ(out.counters.fusion_calls, 3);
    EXPECT_EQ(out.counters.msa_calls, 3);
    EXPECT_EQ(out.counters.head_calls, 3);
    EXPECT_EQ(out.counters.akg_calls, 2);
    EXPECT_EQ(out.counters.skg_calls, 2);
    EXPECT_EQ(out.counters.qfr_calls, 2);
    EXPECT_EQ(out.counters.vfr_calls, 2);
    EXPECT_TRUE(out.stages[0].appearance.has_value());
    EXPECT_TRUE(out.stages[1].spatial.has_value());
    EXPECT_FALSE(out.stages[2].appearance.has_value());
    EXPECT_FALSE(out.stages[2].spatial.has_value());
    const auto& s = out.stages[0];
    EXPECT_EQ(s.query.shape(), (Shape{16, 8}));
    EXPECT_EQ(s.video.shape(), (Shape{3, 16, 8}));
    EXPECT_EQ(s.cross_attn.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(s.temporal_attn.shape(), (Shape{3, 4, 12}));
    EXPECT_EQ(out.final_heads().scores.shape(), (Shape{3, 4 * 4 * 12}));
}

TEST(ModelTest, SingleStageComputesNoKnowledge) {
    DTypeScope scope(DType::kFloat64);
    PrvqlModel model(small_config(1), 6);
    auto in = random_inputs(2, 7);
    auto out = model.forward(in.query, in.frames);
    ASSERT_EQ(out.stages.size(), 1u);
    EXPECT_EQ(out.counters.head_calls, 1);
    EXPECT_EQ(out.counters.akg_calls + out.counters.skg_calls + out.counters.qfr_calls + out.counters.vfr_calls, 0);
    EXPECT_FALSE(out.stages[0].appearance.has_value());
    EXPECT_FALSE(out.stages[0].spatial.has_value());
}

TEST(ModelTest, TiedWeightsWithoutRefinementMatchSingleStage) {
    DTypeScope scope(DType::kFloat64);
    ModelConfig c3 = small_config(3);
    c3.tie_weights = true;
    c3.akg_enabled = false;
    c3.beta = 0.0;
    ModelConfig c1 = c3;
    c1.stages = 1;
    PrvqlModel m3(c3, 8), m1(c1, 8);
    auto in = random_inputs(3, 9);
    auto o3 = m3.forward(in.query, in.frames), o1 = m1.forward(in.query, in.frames);
    expect_bit_equal(o3.final_heads().scores, o1.final_heads().scores);
    expect_bit_equal(o3.final_heads().boxes, o1.final_heads().boxes);
}

TEST(ModelTest, DeterministicForFixedSeed) {
    auto in = random_inputs(2, 10);
    PrvqlModel a(small_config(2), 11), b(small_config(2), 11), other(small_config(2), 12);
    expect_bit_equal(a.forward(in.query, in.frames).final_heads().scores,
                     b.forward(in.query, in.frames).final_heads().scores);
    EXPECT_NE(a.forward(in.query, in.frames).final_heads().scores.to_vector(),
              other.forward(in.query, in.frames).final_heads().scores.to_vector());
}

TEST(ModelTest, ParameterNamesUnique) {
    PrvqlModel model(ModelConfig{}, 1);
    std::set<std::string> names;
    for (const auto& p : model.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
    EXPECT_EQ(model.anchors().size(), 12u * 12u * 12u);
}

TEST(ModelTest, RejectsBadInputs) {
    PrvqlModel model(small_config(1), 13);
    auto in = random_inputs(2, 14);
    EXPECT_THROW(model.forward(in.query, Tensor::zeros({2, 16, 16, 3})), DimensionError);
    EXPECT_THROW(model.forward(Tensor::zeros({16, 16, 3}), in.frames), DimensionError);
    EXPECT_THROW(model.forward(in.query, Tensor::zeros({5, 32, 32, 3})), ConfigError);
}

}  // namespace
}  // namespace prvql
