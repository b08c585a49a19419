#include "prvql/grad_blocks.hpp"

#include "prvql/model.hpp"
#include "prvql/training.hpp"

namespace prvql {

namespace {

constexpr std::int64_t kC = 8;

// Contracts `out` with fixed random weights so every output entry matters.
Tensor probe(const Tensor& out, Rng& rng) {
    std::vector<double> w(static_cast<std::size_t>(out.numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return ops::sum(ops::mul(out, Tensor::from_values(out.shape(), w, DType::kFloat64)));
}

template <class Build>
GradBlock block(std::string name, double tol, Build build) {
    return {name, tol, [build](const GradCheckOptions& options, std::uint64_t seed) {
                DTypeScope scope(DType::kFloat64);
                ParameterStore store(seed);
                Rng rng(seed ^ 0xA5A5A5A5ULL);
                auto built = build(store, rng);
                if constexpr (requires { built.second; }) {
                    return grad_check(built.first, built.second, options);
                } else {
                    return grad_check(std::function<Tensor()>(built), store.params(), options);
                }
            }};
}

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.stages = 2;
    c.frame_side = 32;
    c.query_side = 32;
    c.patch = 8;
    c.channels = kC;
    c.backbone_depth = 1;
    c.heads = 2;
    c.downsample = 2;
    c.max_frames = 4;
    c.window = 1;
    c.tau = 0.3;
    c.top_n = 2;
    c.roi_pool = 2;
    c.head_hidden = 8;
    return c;
}

}  // namespace

std::vector<GradBlock> gradient_check_blocks() {
    const AttentionConfig attn{kC, 2, 1, 2};
    std::vector<GradBlock> blocks;

    blocks.push_back(block("cross_attention", 1e-4, [attn](ParameterStore& s, Rng& rng) {
        CrossAttentionBlock cab(s, "cab", attn);
        Tensor z = s.uniform_range("input.z", {2, 5, kC}, 1.0), u = s.uniform_range("input.u", {6, kC}, 1.0);
        Rng r = rng.fork(1);
        return [=]() mutable {
            Rng local = r;
            auto out = cab(z, u);
            return ops::add(probe(out.features, local), probe(out.attn, local));
        };
    }));

    blocks.push_back(block("masked_self_attention", 1e-4, [attn](ParameterStore& s, Rng& rng) {
        MaskedSelfAttention msa(s, "msa", attn);
        TemporalMask mask(3, 4, 1);
        Tensor x = s.uniform_range("input.x", {12, kC}, 1.0);
        Rng r = rng.fork(2);
        return [=]() mutable {
            Rng local = r;
            auto out = msa(x, mask);
            return ops::add(probe(out.features, local), probe(out.attn, local));
        };
    }));

    blocks.push_back(block("conv_block", 1e-4, [](ParameterStore& s, Rng& rng) {
        nn::ConvBlock cnb(s, "cnb", kC, 6, 8);
        Tensor x = s.uniform_range("input.x", {2, 4, 4, kC}, 1.0);
        Rng r = rng.fork(3);
        return [=]() mutable {
            Rng local = r;
            return probe(cnb(x), local);
        };
    }));

    blocks.push_back(block("downsample_embed", 1e-4, [](ParameterStore& s, Rng& rng) {
        DownsampleEmbed down(s, "down", kC, 4, 4, 2, 3, 4);
        Tensor x = s.uniform_range("input.x", {2, 4, 4, kC}, 1.0);
        Rng r = rng.fork(4);
        return [=]() mutable {
            Rng local = r;
            return probe(down(x), local);
        };
    }));

    blocks.push_back(block("roi_align", 1e-4, [](ParameterStore& s, Rng& rng) {
        Tensor feature = s.uniform_range("input.feature", {6, 6, 4}, 1.0);
        Tensor box = s.constant("input.box", {4}, 0.0);
        const double b[4] = {1.3, 0.7, 8.2, 7.9};
        for (int i = 0; i < 4; ++i) box.mutable_data<double>()[i] = b[i];
        Rng r = rng.fork(5);
        return [=]() mutable {
            Rng local = r;
            return probe(ops::roi_align(feature, box, 3, 0.5, 2), local);
        };
    }));

    blocks.push_back(block("detection_heads", 1e-4, [](ParameterStore& s, Rng& rng) {
        DetectionHeads heads(s, "heads", kC, 8, AnchorSpec{}, {4, 4, 32, 8});
        Tensor x = s.uniform_range("input.x", {2, 2, 2, kC}, 1.0);
        Rng r = rng.fork(6);
        return [=]() mutable {
            Rng local = r;
            auto out = heads(x);
            return ops::add(probe(out.scores, local), ops::scale(probe(out.boxes, local), 0.01));
        };
    }));

    blocks.push_back(block("appearance_knowledge", 1e-4, [](ParameterStore& s, Rng& rng) {
        DetectionHeads heads(s, "heads", kC, 8, AnchorSpec{}, {4, 4, 32, 8});
        Tensor feat = s.uniform_range("input.feat", {3, 2, 2, kC}, 1.0);
        Tensor video = s.uniform_range("input.video", {3, 4, 4, kC}, 1.0);
        Rng r = rng.fork(7);
        return [=]() mutable {
            Rng local = r;
            auto k = appearance_knowledge(heads(feat), video, {0.3, 2, 2, 32});
            if (k.count() == 0) throw ContractError("appearance_knowledge check selected no frames");
            return probe(k.rois, local);
        };
    }));

    blocks.push_back(block("spatial_knowledge", 1e-4, [](ParameterStore& s, Rng& rng) {
        Tensor cross = s.uniform_range("input.cross", {2, 16, 9}, 1.0);
        Tensor temporal = s.uniform_range("input.temporal", {2, 4, 8}, 1.0);
        Rng r = rng.fork(8);
        return [=]() mutable {
            Rng local = r;
            auto k = spatial_knowledge(cross, temporal, 0.5, {4, 4, 2, 2, 3, 3});
            return ops::add(probe(k.maps, local), probe(k.saliency, local));
        };
    }));

    blocks.push_back(block("query_refinement", 1e-4, [attn](ParameterStore& s, Rng& rng) {
        QueryRefiner qfr(s, "qfr", QfrMode::kCrossAttention, attn, 8);
        Tensor query = s.uniform_range("input.query", {9, kC}, 1.0);
        AppearanceKnowledge k;
        k.rois = s.uniform_range("input.rois", {2, 2, 2, kC}, 1.0);
        k.frames = {0, 1};
        k.scores = {0.9, 0.8};
        k.boxes = {Box{}, Box{}};
        Rng r = rng.fork(9);
        return [=]() mutable {
            Rng local = r;
            return probe(qfr(query, k), local);
        };
    }));

    blocks.push_back(block("video_refinement", 1e-4, [](ParameterStore& s, Rng& rng) {
        Tensor saliency = s.uniform_range("input.saliency", {2, 6}, 1.0);
        Tensor video = s.uniform_range("input.video", {2, 6, kC}, 1.0);
        Rng r = rng.fork(10);
        return [=]() mutable {
            Rng local = r;
            return probe(refine_video(saliency, video, 0.3), local);
        };
    }));

    blocks.push_back(block("giou_loss", 1e-4, [](ParameterStore& s, Rng&) {
        Tensor pred = s.constant("input.pred", {3, 4}, 0.0);
        const double b[12] = {1, 2, 6, 7, 0.5, 0.5, 3, 4, 10, 10, 12, 13};
        for (int i = 0; i < 12; ++i) pred.mutable_data<double>()[i] = b[i];
        Tensor gt = Tensor::from_values({3, 4}, {2, 1, 7, 5, 1, 1, 4, 3, 0, 0, 2, 2}, DType::kFloat64);
        return [=]() { return ops::sum(giou_tensor(pred, gt)); };
    }));

    blocks.push_back(block("full_model", 1e-3, [](ParameterStore&, Rng& rng) {
        auto model = std::make_shared<PrvqlModel>(tiny_model_config(), rng.next_u64());
        Rng r = rng.fork(11);
        std::vector<double> q(32 * 32 * 3), f(2 * 32 * 32 * 3);
        for (auto& v : q) v = r.uniform();
        for (auto& v : f) v = r.uniform();
        const Tensor query = Tensor::from_values({32, 32, 3}, q), frames = Tensor::from_values({2, 32, 32, 3}, f);
        const auto targets = assign_targets(model->anchors(), {Box{6, 8, 20, 22}, std::nullopt});
        LossConfig loss;
        loss.frame_side = 32;
        std::function<Tensor()> fn = [=]() { return total_loss(model->forward(query, frames), targets, loss).total; };
        return std::make_pair(fn, model->parameters());
    }));
    return blocks;
}

GradBlock faulty_gradient_block() {
    return block("fault_injection", 1e-4, [](ParameterStore& s, Rng&) {
        Tensor x = s.uniform_range("input.x", {5}, 1.0);
        return [=]() {
            // Forward scales by 3; the recorded backward claims 2.
            auto data = std::make_shared<Storage>(DType::kFloat64, 5);
            for (int i = 0; i < 5; ++i) data->as<double>()[i] = 3.0 * x.data<double>()[i];
            Tensor y = make_result({5}, data, "faulty_scale", {x},
                                   [](const Tensor& g) { return std::vector<Tensor>{ops::scale(g, 2.0)}; });
            return ops::sum(ops::square(y));
        };
    });
}

}  // namespace prvql
