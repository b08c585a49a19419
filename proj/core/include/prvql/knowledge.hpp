#pragma once

#include <cstdint>
#include <vector>

#include "prvql/core/nn.hpp"
#include "prvql/geometry.hpp"

namespace prvql {

struct HeadOutput {
    Tensor logits;   // [L, H, W, m]
    Tensor offsets;  // [L, H, W, 4m], pixels
    Tensor boxes;    // [L, H*W*m, 4], decoded and clamped to the frame
    Tensor scores;   // [L, H*W*m], sigmoid of logits
};

// Adds anchors to offsets, orders each coordinate pair and clamps to
// [0, frame_side]. offsets: [L, N, 4], anchors: [N, 4].
Tensor decode_boxes(const Tensor& offsets, const Tensor& anchors, double frame_side);

// Upsample to the frame feature grid, 1x1 conv, split the channels in halves
// and run a classification and a regression ConvBlock.
class DetectionHeads {
   public:
    struct Geometry {
        std::int64_t grid_h = 12, grid_w = 12;
        double frame_side = 96;
        // Raw regression outputs are multiplied by this many pixels.
        double offset_scale = 8;
    };

    DetectionHeads() = default;
    DetectionHeads(ParameterStore& store, const std::string& name, std::int64_t channels, std::int64_t hidden,
                   const AnchorSpec& anchors, const Geometry& geometry);

    // features: [L, h, w, C].
    HeadOutput operator()(const Tensor& features) const;

    const std::vector<Box>& anchors() const { return anchors_; }
    std::int64_t anchors_per_cell() const { return m_; }

    nn::Conv2d up;
    nn::ConvBlock cls, reg;

   private:
    Geometry geometry_;
    std::int64_t m_ = 0;
    std::vector<Box> anchors_;
};

struct FrameBest {
    std::int64_t index = 0;
    double score = 0;
    Box box;
};

// Highest-scoring anchor per frame; ties go to the lowest flat index.
// scores: [L, N], boxes: [L, N, 4].
std::vector<FrameBest> per_frame_best(const Tensor& scores, const Tensor& boxes);

struct Selection {
    std::int64_t frame = 0;
    double score = 0;
};

// Frames with score > tau, best first (ties by lower frame), at most n.
std::vector<Selection> select_topn(const std::vector<double>& scores, double tau, std::int64_t n);

struct AppearanceKnowledge {
    Tensor rois;  // [n', P, P, C]; undefined when n' = 0
    std::vector<std::int64_t> frames;
    std::vector<double> scores;
    std::vector<Box> boxes;

    std::int64_t count() const { return static_cast<std::int64_t>(frames.size()); }
};

struct AkgConfig {
    double tau = 0.7;
    std::int64_t top_n = 3;
    std::int64_t pool = 5;
    double frame_side = 96;
};

// RoI features of the most confident frames, pooled from the stage-input
// video feature `video` [L, H, W, C] at the per-frame best boxes of `heads`.
AppearanceKnowledge appearance_knowledge(const HeadOutput& heads, const Tensor& video, const AkgConfig& config);

// [L, hw, L*hw] -> [L, hw, hw]: each frame's within-frame attention block.
Tensor extract_diagonal_blocks(const Tensor& temporal_attn);

struct SpatialKnowledge {
    Tensor maps;      // [L, HW, HW_q]
    Tensor saliency;  // [L, HW], per-frame min-max normalized
};

struct SkgGeometry {
    std::int64_t grid_h = 12, grid_w = 12;    // video feature grid
    std::int64_t down_h = 6, down_w = 6;      // grid after downsampling
    std::int64_t query_h = 12, query_w = 12;  // query feature grid
};

// Blends the resized within-frame self-attention with the cross-attention
// maps: alpha * resize(diag(T)) + (1 - alpha) * S.
SpatialKnowledge spatial_knowledge(const Tensor& cross_attn, const Tensor& temporal_attn, double alpha,
                                   const SkgGeometry& geometry);

}  // namespace prvql
