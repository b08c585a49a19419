#include "prvql/knowledge.hpp"

#include <algorithm>

namespace prvql {

Tensor decode_boxes(const Tensor& offsets, const Tensor& anchors, double frame_side) {
    if (offsets.dim() != 3 || offsets.shape()[2] != 4 || anchors.dim() != 2 || anchors.shape()[0] != offsets.shape()[1])
        throw DimensionError("decode_boxes: offsets " + shape_str(offsets.shape()) + " vs anchors " +
                             shape_str(anchors.shape()));
    const Tensor raw = ops::add(offsets, anchors);
    const Tensor x1 = ops::slice(raw, 2, 0, 1), y1 = ops::slice(raw, 2, 1, 2);
    const Tensor x2 = ops::slice(raw, 2, 2, 3), y2 = ops::slice(raw, 2, 3, 4);
    const Tensor parts[] = {ops::minimum(x1, x2), ops::minimum(y1, y2), ops::maximum(x1, x2), ops::maximum(y1, y2)};
    return ops::clamp(ops::concat(parts, 2), 0.0, frame_side);
}

DetectionHeads::DetectionHeads(ParameterStore& store, const std::string& name, std::int64_t channels,
                               std::int64_t hidden, const AnchorSpec& anchors, const Geometry& geometry)
    : geometry_(geometry), m_(anchors.per_cell()) {
    if (channels % 2 != 0)
        throw ConfigError("detection heads need an even channel count, got " + std::to_string(channels));
    anchors_ = make_anchors(anchors, geometry.grid_h, geometry.grid_w, geometry.frame_side);
    up = nn::Conv2d(store, name + ".up", 1, channels, channels);
    cls = nn::ConvBlock(store, name + ".cls", channels / 2, m_, hidden);
    reg = nn::ConvBlock(store, name + ".reg", channels / 2, 4 * m_, hidden);
}

HeadOutput DetectionHeads::operator()(const Tensor& features) const {
    if (features.dim() != 4) throw DimensionError("detection heads expect [L, h, w, C], got " + shape_str(features.shape()));
    const auto L = features.shape()[0], C = features.shape()[3];
    if (C % 2 != 0) throw ConfigError("detection heads need an even channel count, got " + std::to_string(C));
    const Tensor x = up(ops::bilinear_resize(features, geometry_.grid_h, geometry_.grid_w));
    HeadOutput out;
    out.logits = cls(ops::slice(x, 3, 0, C / 2));
    out.offsets = ops::scale(reg(ops::slice(x, 3, C / 2, C)), geometry_.offset_scale);
    const std::int64_t n = geometry_.grid_h * geometry_.grid_w * m_;
    out.boxes = decode_boxes(ops::reshape(out.offsets, {L, n, 4}), anchors_tensor(anchors_, features.dtype()),
                             geometry_.frame_side);
    out.scores = ops::reshape(ops::sigmoid(out.logits), {L, n});
    return out;
}

std::vector<FrameBest> per_frame_best(const Tensor& scores, const Tensor& boxes) {
    if (scores.dim() != 2 || boxes.dim() != 3 || boxes.shape()[0] != scores.shape()[0] ||
        boxes.shape()[1] != scores.shape()[1] || boxes.shape()[2] != 4)
        throw DimensionError("per_frame_best: scores " + shape_str(scores.shape()) + " vs boxes " +
                             shape_str(boxes.shape()));
    const auto L = scores.shape()[0], n = scores.shape()[1];
    const auto s = scores.to_vector();
    const auto b = boxes.to_vector();
    std::vector<FrameBest> out;
    for (std::int64_t i = 0; i < L; ++i) {
        const auto row = s.begin() + i * n;
        const auto best = std::max_element(row, row + n) - row;
        const double* bb = b.data() + (i * n + best) * 4;
        out.push_back({best, row[best], {bb[0], bb[1], bb[2], bb[3]}});
    }
    return out;
}

std::vector<Selection> select_topn(const std::vector<double>& scores, double tau, std::int64_t n) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
    if (n < 1) throw ConfigError("top-n must be >= 1");
    std::vector<Selection> kept;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] > tau) kept.push_back({static_cast<std::int64_t>(i), scores[i]});
    std::stable_sort(kept.begin(), kept.end(), [](const Selection& a, const Selection& b) { return a.score > b.score; });
    if (static_cast<std::int64_t>(kept.size()) > n) kept.resize(static_cast<std::size_t>(n));
    return kept;
}

AppearanceKnowledge appearance_knowledge(const HeadOutput& heads, const Tensor& video, const AkgConfig& config) {
    if (video.dim() != 4) throw DimensionError("appearance knowledge expects video [L, H, W, C], got " + shape_str(video.shape()));
    const auto best = per_frame_best(heads.scores, heads.boxes);
    std::vector<double> frame_scores;
    for (const auto& b : best) frame_scores.push_back(b.score);
    const auto selected = select_topn(frame_scores, config.tau, config.top_n);

    AppearanceKnowledge k;
    if (selected.empty()) return k;
    const auto L = heads.boxes.shape()[0], n = heads.boxes.shape()[1];
    const auto H = video.shape()[1], W = video.shape()[2], C = video.shape()[3];
    const Tensor flat_boxes = ops::reshape(heads.boxes, {L * n, 4});
    const double spatial_scale = static_cast<double>(H) / config.frame_side;
    std::vector<Tensor> rois;
    for (const auto& s : selected) {
        const std::int64_t row = s.frame * n + best[static_cast<std::size_t>(s.frame)].index;
        const Tensor box = ops::reshape(ops::index_select(flat_boxes, 0, std::span<const std::int64_t>(&row, 1)), {4});
        const Tensor feat = ops::reshape(ops::slice(video, 0, s.frame, s.frame + 1), {H, W, C});
        rois.push_back(ops::roi_align(feat, box, config.pool, spatial_scale, 2));
        k.frames.push_back(s.frame);
        k.scores.push_back(s.score);
        k.boxes.push_back(best[static_cast<std::size_t>(s.frame)].box);
    }
    k.rois = ops::stack(rois, 0);
    return k;
}

Tensor extract_diagonal_blocks(const Tensor& temporal_attn) {
    if (temporal_attn.dim() != 3 || temporal_attn.shape()[2] != temporal_attn.shape()[0] * temporal_attn.shape()[1])
        throw DimensionError("extract_diagonal_blocks expects [L, hw, L*hw], got " + shape_str(temporal_attn.shape()));
    const auto L = temporal_attn.shape()[0], hw = temporal_attn.shape()[1];
    std::vector<Tensor> blocks;
    for (std::int64_t i = 0; i < L; ++i) {
        const Tensor frame = ops::slice(temporal_attn, 0, i, i + 1);
        blocks.push_back(ops::slice(frame, 2, i * hw, (i + 1) * hw));
    }
    return ops::concat(blocks, 0);
}

SpatialKnowledge spatial_knowledge(const Tensor& cross_attn, const Tensor& temporal_attn, double alpha,
                                   const SkgGeometry& g) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    const auto HW = g.grid_h * g.grid_w, hw = g.down_h * g.down_w, HWq = g.query_h * g.query_w;
    if (cross_attn.dim() != 3 || cross_attn.shape()[1] != HW || cross_attn.shape()[2] != HWq)
        throw DimensionError("skg: cross-attention maps " + shape_str(cross_attn.shape()) + " do not match grids");
    const auto L = cross_attn.shape()[0];
    if (temporal_attn.dim() != 3 || temporal_attn.shape()[0] != L || temporal_attn.shape()[1] != hw)
        throw DimensionError("skg: temporal maps " + shape_str(temporal_attn.shape()) + " do not match grids");

    // Resize the query-token axis, then the key-token axis.
    Tensor t = extract_diagonal_blocks(temporal_attn);
    t = ops::bilinear_resize(ops::reshape(t, {L, g.down_h, g.down_w, hw}), g.grid_h, g.grid_w);
    t = ops::transpose(ops::reshape(t, {L, HW, hw}));
    t = ops::bilinear_resize(ops::reshape(t, {L, g.down_h, g.down_w, HW}), g.query_h, g.query_w);
    t = ops::transpose(ops::reshape(t, {L, HWq, HW}));

    SpatialKnowledge k;
    k.maps = ops::add(ops::scale(t, alpha), ops::scale(cross_attn, 1.0 - alpha));
    k.saliency = ops::minmax_normalize(ops::max(k.maps, -1));
    return k;
}

}  // namespace prvql
