#include <algorithm>
#include <cmath>

#include "prvql/knowledge.hpp"
#include "prvql/refinement.hpp"
#include "test_util.hpp"

namespace prvql {
namespace {

using test::expect_all_near;
using test::expect_bit_equal;
using test::random_tensor;

class KnowledgeTest : public ::testing::Test {
   protected:
    DTypeScope scope_{DType::kFloat64};
};

TEST(GeometryTest, IouAndGiouHandValues) {
    EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0);
    EXPECT_DOUBLE_EQ(giou({0, 0, 1, 1}, {2, 2, 3, 3}), -7.0 / 9.0);
    EXPECT_DOUBLE_EQ(giou({1, 2, 5, 6}, {1, 2, 5, 6}), 1.0);
    EXPECT_GT(giou({0, 0, 1, 1}, {1e6, 1e6, 1e6 + 1, 1e6 + 1}), -1.0);
    EXPECT_LT(giou({0, 0, 1, 1}, {1e3, 1e3, 1e3 + 1, 1e3 + 1}), -0.999);
    EXPECT_EQ(iou({2, 2, 2, 2}, {2, 2, 2, 2}), 1.0);
    EXPECT_EQ(iou({2, 2, 2, 2}, {3, 3, 3, 3}), 0.0);
}

TEST(GeometryProperty, GiouSymmetricAndBelowIou) {
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
        auto box = [&] {
            const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
            return Box{x, y, x + rng.uniform(0.1, 30), y + rng.uniform(0.1, 30)};
        };
        const Box a = box(), b = box();
        ASSERT_NEAR(giou(a, b), giou(b, a), 1e-15);
        ASSERT_LE(giou(a, b), iou(a, b) + 1e-15);
        ASSERT_GT(giou(a, b), -1.0);
        ASSERT_GE(iou(a, b), 0.0);
        ASSERT_LE(iou(a, b), 1.0);
    }
}

TEST(GeometryTest, AnchorLayout) {
    AnchorSpec spec;
    auto anchors = make_anchors(spec, 12, 12, 96);
    ASSERT_EQ(anchors.size(), 12u * 12u * 12u);
    EXPECT_EQ(spec.per_cell(), 12);
    // Cell (y=1, x=2), scale 64/480, ratio 2.
    const Box& a = anchors[static_cast<std::size_t>((1 * 12 + 2) * 12 + 2 * 3 + 2)];
    const double side = 64.0 / 480.0 * 96, w = side / std::sqrt(2.0), h = side * std::sqrt(2.0);
    EXPECT_NEAR((a.x1 + a.x2) / 2, 20.0, 1e-12);
    EXPECT_NEAR((a.y1 + a.y2) / 2, 12.0, 1e-12);
    EXPECT_NEAR(a.width(), w, 1e-12);
    EXPECT_NEAR(a.height(), h, 1e-12);
    EXPECT_THROW(make_anchors(AnchorSpec{{}, {1.0}}, 2, 2, 8), ConfigError);
}

TEST_F(KnowledgeTest, DecodeZeroOffsetsGivesAnchors) {
    auto anchors = make_anchors(AnchorSpec{}, 2, 2, 16);
    const auto n = static_cast<std::int64_t>(anchors.size());
    auto boxes = decode_boxes(Tensor::zeros({1, n, 4}), anchors_tensor(anchors), 1e9);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& a = anchors[static_cast<std::size_t>(i)];
        EXPECT_EQ(boxes.at({0, i, 0}), a.x1);
        EXPECT_EQ(boxes.at({0, i, 3}), a.y2);
    }
}

TEST_F(KnowledgeTest, DecodeMatchesAddOrderClampOracle) {
    Rng rng(2);
    auto anchors = make_anchors(AnchorSpec{}, 3, 3, 24);
    const auto n = static_cast<std::int64_t>(anchors.size());
    auto offsets = random_tensor({2, n, 4}, rng, 6.0);
    auto boxes = decode_boxes(offsets, anchors_tensor(anchors), 24);
    for (std::int64_t l = 0; l < 2; ++l)
        for (std::int64_t i = 0; i < n; ++i) {
            const auto a = anchors[static_cast<std::size_t>(i)].as_array();
            double r[4];
            for (int c = 0; c < 4; ++c) r[c] = offsets.at({l, i, c}) + a[static_cast<std::size_t>(c)];
            const double want[4] = {std::min(r[0], r[2]), std::min(r[1], r[3]), std::max(r[0], r[2]), std::max(r[1], r[3])};
            for (int c = 0; c < 4; ++c) ASSERT_EQ(boxes.at({l, i, c}), std::clamp(want[c], 0.0, 24.0));
        }
    // Clamping is idempotent.
    auto again = decode_boxes(ops::sub(boxes, anchors_tensor(anchors)), anchors_tensor(anchors), 24);
    expect_all_near(again, boxes.to_vector(), 1e-12);
}

TEST_F(KnowledgeTest, HeadOutputShapes) {
    ParameterStore store(3);
    DetectionHeads heads(store, "heads", 8, 8, AnchorSpec{}, {12, 12, 96, 8});
    Rng rng(4);
    auto out = heads(random_tensor({2, 6, 6, 8}, rng));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 12, 12, 12}));
    EXPECT_EQ(out.offsets.shape(), (Shape{2, 12, 12, 48}));
    EXPECT_EQ(out.boxes.shape(), (Shape{2, 1728, 4}));
    EXPECT_EQ(out.scores.shape(), (Shape{2, 1728}));
    for (double s : out.scores.to_vector()) {
        ASSERT_GT(s, 0.0);
        ASSERT_LT(s, 1.0);
    }
    EXPECT_THROW(DetectionHeads(store, "odd", 7, 8, AnchorSpec{}, {}), ConfigError);
}

TEST(PerFrameBestTest, TieAndSpike) {
    auto scores = Tensor::from_values({2, 3}, {0.5, 0.5, 0.5, 0.1, 0.9, 0.2}, DType::kFloat64);
    std::vector<double> b(24);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<double>(i);
    auto best = per_frame_best(scores, Tensor::from_values({2, 3, 4}, b, DType::kFloat64));
    EXPECT_EQ(best[0].index, 0);
    EXPECT_EQ(best[1].index, 1);
    EXPECT_DOUBLE_EQ(best[1].score, 0.9);
    EXPECT_EQ(best[1].box, (Box{16, 17, 18, 19}));
}

TEST(PerFrameBestProperty, MatchesScanAndMonotoneInvariant) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(2 * 6), b(2 * 6 * 4);
        for (auto& v : s) v = static_cast<double>(rng.uniform_int(0, 4)) / 4.0;
        for (auto& v : b) v = rng.uniform(0, 10);
        auto best = per_frame_best(Tensor::from_values({2, 6}, s, DType::kFloat64),
                                   Tensor::from_values({2, 6, 4}, b, DType::kFloat64));
        std::vector<double> t(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3 * s[i]) - 7;
        auto moved = per_frame_best(Tensor::from_values({2, 6}, t, DType::kFloat64),
                                    Tensor::from_values({2, 6, 4}, b, DType::kFloat64));
        for (int f = 0; f < 2; ++f) {
            int want = 0;
            for (int i = 1; i < 6; ++i)
                if (s[static_cast<std::size_t>(f * 6 + i)] > s[static_cast<std::size_t>(f * 6 + want)]) want = i;
            ASSERT_EQ(best[static_cast<std::size_t>(f)].index, want);
            ASSERT_EQ(moved[static_cast<std::size_t>(f)].index, want);
        }
    }
}

TEST(SelectTopnTest, Examples) {
    auto sel = select_topn({0.9, 0.65, 0.8, 0.75}, 0.7, 3);
    ASSERT_EQ(sel.size(), 3u);
    EXPECT_EQ(sel[0].frame, 0);
    EXPECT_EQ(sel[1].frame, 2);
    EXPECT_EQ(sel[2].frame, 3);
    EXPECT_TRUE(select_topn({0.1, 0.7, 0.3}, 0.7, 3).empty());
    EXPECT_EQ(select_topn({0.8, 0.2, 0.9}, 0.7, 3).size(), 2u);
    auto ties = select_topn({0.8, 0.8, 0.8}, 0.7, 2);
    EXPECT_EQ(ties[0].frame, 0);
    EXPECT_EQ(ties[1].frame, 1);
    EXPECT_THROW(select_topn({0.5}, 1.0, 1), ConfigError);
}

TEST(SelectTopnProperty, BoundedAndMonotoneInTau) {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(8);
        for (auto& v : s) v = rng.uniform();
        const auto n = rng.uniform_int(1, 5);
        const double hi = rng.uniform(0.05, 0.95), lo = hi * rng.uniform(0.1, 0.99);
        auto a = select_topn(s, hi, 8), b = select_topn(s, lo, 8);
        ASSERT_LE(static_cast<std::int64_t>(select_topn(s, hi, n).size()), n);
        ASSERT_LE(a.size(), b.size());
        for (const auto& x : a)
            ASSERT_TRUE(std::any_of(b.begin(), b.end(), [&](const Selection& y) { return y.frame == x.frame; }));
    }
}

TEST_F(KnowledgeTest, AppearanceKnowledgeComposesComponents) {
    ParameterStore store(7);
    DetectionHeads heads(store, "heads", 8, 8, AnchorSpec{}, {4, 4, 32, 8});
    Rng rng(8);
    auto feat = random_tensor({4, 2, 2, 8}, rng, 3.0);
    auto video = random_tensor({4, 4, 4, 8}, rng);
    auto out = heads(feat);
    auto k = appearance_knowledge(out, video, {0.3, 3, 2, 32});
    auto best = per_frame_best(out.scores, out.boxes);
    std::vector<double> fs;
    for (const auto& b : best) fs.push_back(b.score);
    auto sel = select_topn(fs, 0.3, 3);
    ASSERT_EQ(k.count(), static_cast<std::int64_t>(sel.size()));
    ASSERT_GT(k.count(), 0);
    EXPECT_LE(k.count(), 3);
    for (std::int64_t i = 0; i < k.count(); ++i) {
        const auto f = sel[static_cast<std::size_t>(i)].frame;
        EXPECT_EQ(k.frames[static_cast<std::size_t>(i)], f);
        const auto box = best[static_cast<std::size_t>(f)].box.as_array();
        auto roi = ops::roi_align(ops::reshape(ops::slice(video, 0, f, f + 1), {4, 4, 8}),
                                  Tensor::from_values({4}, std::span<const double>(box.data(), 4)), 2, 4.0 / 32.0);
        expect_all_near(ops::slice(k.rois, 0, i, i + 1), roi.to_vector(), 1e-12);
    }
    auto none = appearance_knowledge(out, video, {0.999999, 3, 2, 32});
    EXPECT_EQ(none.count(), 0);
    EXPECT_FALSE(none.rois.defined());
}

TEST_F(KnowledgeTest, DiagonalBlocksMatchIndexOracle) {
    Rng rng(9);
    auto t = random_tensor({2, 2, 4}, rng);
    auto d = extract_diagonal_blocks(t);
    ASSERT_EQ(d.shape(), (Shape{2, 2, 2}));
    for (int i = 0; i < 2; ++i)
        for (int p = 0; p < 2; ++p)
            for (int q = 0; q < 2; ++q) EXPECT_EQ(d.at({i, p, q}), t.at({i, p, i * 2 + q}));
    auto single = random_tensor({1, 3, 3}, rng);
    expect_bit_equal(extract_diagonal_blocks(single), single);
}

TEST_F(KnowledgeTest, WindowZeroDiagonalHoldsAllMass) {
    ParameterStore store(10);
    MaskedSelfAttention msa(store, "msa", {4, 1, 1, 2});
    Rng rng(11);
    auto attn = msa(random_tensor({3 * 4, 4}, rng), TemporalMask(3, 4, 0)).attn;
    auto d = extract_diagonal_blocks(attn);
    EXPECT_NEAR(ops::sum(d).item(), ops::sum(attn).item(), 1e-12);
    EXPECT_NEAR(ops::sum(d).item(), 12.0, 1e-12);
}

TEST_F(KnowledgeTest, SpatialKnowledgeEndpointsAndLinearity) {
    const SkgGeometry g{4, 4, 2, 2, 3, 3};
    Rng rng(12);
    auto cross = random_tensor({2, 16, 9}, rng), temporal = random_tensor({2, 4, 8}, rng);
    expect_bit_equal(spatial_knowledge(cross, temporal, 0.0, g).maps, cross);
    auto resized = spatial_knowledge(cross, temporal, 1.0, g).maps;
    // Resized diagonal blocks: query axis hw -> HW, key axis hw -> HW_q.
    auto d = extract_diagonal_blocks(temporal);
    auto t = ops::bilinear_resize(ops::reshape(d, {2, 2, 2, 4}), 4, 4);
    t = ops::transpose(ops::reshape(t, {2, 16, 4}));
    t = ops::bilinear_resize(ops::reshape(t, {2, 2, 2, 16}), 3, 3);
    t = ops::transpose(ops::reshape(t, {2, 9, 16}));
    expect_bit_equal(resized, t);

    auto a = Tensor::full({1, 16, 9}, 0.2), b = Tensor::full({1, 4, 4}, 0.6);
    for (double v : spatial_knowledge(a, b, 0.5, g).maps.to_vector()) EXPECT_NEAR(v, 0.4, 1e-15);
    EXPECT_THROW(spatial_knowledge(cross, temporal, 1.5, g), ConfigError);
}

TEST_F(KnowledgeTest, SpatialKnowledgeIsConvexAndSaliencyNormalized) {
    const SkgGeometry g{4, 4, 2, 2, 4, 4};
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        auto cross = ops::softmax(random_tensor({2, 16, 16}, rng));
        auto temporal = ops::softmax(random_tensor({2, 4, 8}, rng));
        const double alpha = rng.uniform();
        auto k = spatial_knowledge(cross, temporal, alpha, g);
        auto lo = spatial_knowledge(cross, temporal, 0.0, g).maps.to_vector();
        auto hi = spatial_knowledge(cross, temporal, 1.0, g).maps.to_vector();
        auto m = k.maps.to_vector();
        for (std::size_t i = 0; i < m.size(); ++i) {
            ASSERT_GE(m[i], std::min(lo[i], hi[i]) - 1e-15);
            ASSERT_LE(m[i], std::max(lo[i], hi[i]) + 1e-15);
        }
        auto s = k.saliency.to_vector();
        for (int f = 0; f < 2; ++f) {
            auto row = std::vector<double>(s.begin() + f * 16, s.begin() + (f + 1) * 16);
            ASSERT_DOUBLE_EQ(*std::min_element(row.begin(), row.end()), 0.0);
            ASSERT_DOUBLE_EQ(*std::max_element(row.begin(), row.end()), 1.0);
        }
    }
}

TEST_F(KnowledgeTest, VideoRefinementIdentities) {
    Rng rng(14);
    auto video = random_tensor({2, 5, 3}, rng);
    auto saliency = ops::sigmoid(random_tensor({2, 5}, rng));
    expect_bit_equal(refine_video(saliency, video, 0.0), video);
    expect_bit_equal(refine_video(Tensor::ones({2, 5}), video, 0.7), video);
    auto s = Tensor::ones({2, 5});
    s.mutable_data<double>()[3] = 0.0;
    auto out = refine_video(s, video, 0.1);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.at({0, 3, c}), 0.9 * video.at({0, 3, c}), 1e-15);
    EXPECT_THROW(refine_video(saliency, video, -0.1), ConfigError);
    EXPECT_THROW(refine_video(Tensor::ones({2, 4}), video, 0.1), DimensionError);
}

TEST_F(KnowledgeTest, VideoRefinementBoundedByBeta) {
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        auto video = random_tensor({2, 4, 3}, rng);
        auto saliency = ops::sigmoid(random_tensor({2, 4}, rng));
        const double beta = rng.uniform();
        auto out = refine_video(saliency, video, beta).to_vector();
        auto v = video.to_vector();
        for (std::size_t i = 0; i < v.size(); ++i) ASSERT_LE(std::abs(out[i] - v[i]), beta * std::abs(v[i]) + 1e-15);
    }
}

AppearanceKnowledge knowledge_with(Tensor rois) {
    AppearanceKnowledge k;
    k.rois = std::move(rois);
    for (std::int64_t i = 0; i < k.rois.shape()[0]; ++i) {
        k.frames.push_back(i);
        k.scores.push_back(0.9);
        k.boxes.push_back({});
    }
    return k;
}

TEST_F(KnowledgeTest, QueryRefinementModes) {
    Rng rng(16);
    auto query = random_tensor({9, 4}, rng);
    for (auto mode : {QfrMode::kCrossAttention, QfrMode::kAddition, QfrMode::kConcatenation}) {
        ParameterStore store(17);
        QueryRefiner qfr(store, "qfr", mode, {4, 1, 1, 2}, 6);
        expect_bit_equal(qfr(query, AppearanceKnowledge{}), query);
        auto out = qfr(query, knowledge_with(random_tensor({2, 2, 2, 4}, rng)));
        EXPECT_EQ(out.shape(), query.shape());
        EXPECT_EQ(parse_qfr_mode(qfr_mode_name(mode)), mode);
    }
    EXPECT_THROW(parse_qfr_mode("sum"), ConfigError);
}

TEST_F(KnowledgeTest, AdditionWithZeroConvBlockIsIdentity) {
    ParameterStore store(18);
    QueryRefiner qfr(store, "qfr", QfrMode::kAddition, {4, 1, 1, 2}, 6);
    for (auto* t : {&qfr.cnb.conv1.weight, &qfr.cnb.conv1.bias}) {
        auto* p = t->mutable_data<double>();
        std::fill(p, p + t->numel(), 0.0);
    }
    Rng rng(19);
    auto query = random_tensor({9, 4}, rng);
    expect_bit_equal(qfr(query, knowledge_with(random_tensor({1, 2, 2, 4}, rng))), query);
}

TEST_F(KnowledgeTest, SingleKnowledgeTokenCrossAttentionMatchesHandBlock) {
    ParameterStore store(20);
    QueryRefiner qfr(store, "qfr", QfrMode::kCrossAttention, {4, 1, 1, 2}, 6);
    Rng rng(21);
    auto query = random_tensor({5, 4}, rng);
    auto k = knowledge_with(random_tensor({1, 1, 1, 4}, rng));
    auto token = qfr.knowledge_tokens(k);
    ASSERT_EQ(token.shape(), (Shape{1, 4}));
    auto via_block = qfr.cab(query, token);
    for (double a : via_block.attn.to_vector()) EXPECT_NEAR(a, 1.0, 1e-15);
    expect_bit_equal(qfr(query, k), via_block.features);

    // One key: attention is the identity selector, so the residual adds
    // Wo * Wv * LN(token) to every row before the feed-forward sublayer.
    auto get = [&](const std::string& n) { return store.get(n).tensor; };
    auto ln = [](const Tensor& x, const Tensor& g, const Tensor& b) { return ops::layer_norm(x, g, b); };
    auto v = ops::add(ops::matmul(ln(token, get("qfr.cab.layer0.norm_kv.gamma"), get("qfr.cab.layer0.norm_kv.beta")),
                                  get("qfr.cab.layer0.wv.weight")),
                      get("qfr.cab.layer0.wv.bias"));
    auto o = ops::add(ops::matmul(v, get("qfr.cab.layer0.wo.weight")), get("qfr.cab.layer0.wo.bias"));
    auto h = ops::add(query, o);
    auto ff_in = ln(h, get("qfr.cab.layer0.norm_ff.gamma"), get("qfr.cab.layer0.norm_ff.beta"));
    auto ff = ops::add(ops::matmul(ops::gelu(ops::add(ops::matmul(ff_in, get("qfr.cab.layer0.ffn.fc1.weight")),
                                                      get("qfr.cab.layer0.ffn.fc1.bias"))),
                                   get("qfr.cab.layer0.ffn.fc2.weight")),
                       get("qfr.cab.layer0.ffn.fc2.bias"));
    expect_all_near(via_block.features, ops::add(h, ff).to_vector(), 1e-12);
}

}  // namespace
}  // namespace prvql
