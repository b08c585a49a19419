#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "prvql/attention.hpp"
#include "prvql/knowledge.hpp"
#include "prvql/refinement.hpp"

namespace prvql {

struct ModelConfig {
    std::int64_t stages = 3;  // K
    std::int64_t frame_side = 96;
    std::int64_t query_side = 96;
    std::int64_t patch = 8;
    std::int64_t channels = 64;
    std::int64_t backbone_depth = 2;
    std::int64_t heads = 1;
    std::int64_t cab_depth = 1;
    std::int64_t msa_depth = 1;
    std::int64_t ffn_ratio = 2;
    std::int64_t downsample = 2;
    std::int64_t downsample_kernel = 3;
    std::int64_t max_frames = 32;
    std::int64_t window = 2;  // u
    double tau = 0.7;
    std::int64_t top_n = 3;
    std::int64_t roi_pool = 5;
    double alpha = 0.5;
    double beta = 0.1;
    QfrMode qfr_mode = QfrMode::kCrossAttention;
    std::int64_t head_hidden = 32;
    double offset_scale = 8;
    AnchorSpec anchors;
    bool tie_weights = false;
    bool akg_enabled = true;
    bool skg_enabled = true;

    std::int64_t grid() const { return frame_side / patch; }
    std::int64_t query_grid() const { return query_side / patch; }
    std::int64_t down_grid() const { return grid() / downsample; }
    // Throws ConfigError on any inconsistent field.
    void validate() const;
};

// Strict JSON round-trip; unknown keys and wrong types are rejected.
ModelConfig model_config_from_json(const std::string& text, const ModelConfig& base = {});
std::string model_config_to_json(const ModelConfig& config);

// Shared patch-embedding transformer for the query and the frames.
class Backbone {
   public:
    Backbone() = default;
    Backbone(ParameterStore& store, const ModelConfig& config);

    // images: [N, S, S, 3] -> tokens [N, (S/patch)^2, C].
    Tensor operator()(const Tensor& images) const;

    Tensor patch_weight, patch_bias, pos;

   private:
    std::int64_t patch_ = 8, grid_ = 12, channels_ = 64;
    std::vector<AttentionLayer> layers_;
    nn::LayerNorm norm_;
};

struct StageBlocks {
    CrossAttentionBlock fuse;
    DownsampleEmbed down;
    MaskedSelfAttention msa;
};

struct StageState {
    Tensor query;     // Q_k [HW_q, C]
    Tensor video;     // V_k [L, HW, C]
    Tensor fused;     // X_k [L, HW, C]
    Tensor enhanced;  // H_k [L*hw, C]
    Tensor cross_attn;     // S_k [L, HW, HW_q]
    Tensor temporal_attn;  // T_k [L, hw, L*hw]
    HeadOutput heads;
    std::optional<AppearanceKnowledge> appearance;
    std::optional<SpatialKnowledge> spatial;
};

struct Instrumentation {
    std::int64_t fusion_calls = 0;
    std::int64_t msa_calls = 0;
    std::int64_t head_calls = 0;
    std::int64_t akg_calls = 0;
    std::int64_t skg_calls = 0;
    std::int64_t qfr_calls = 0;
    std::int64_t vfr_calls = 0;
};

struct ForwardResult {
    std::vector<StageState> stages;
    Instrumentation counters;

    const HeadOutput& final_heads() const { return stages.back().heads; }
};

class PrvqlModel {
   public:
    PrvqlModel(const ModelConfig& config, std::uint64_t seed);

    // query: [S_q, S_q, 3], frames: [L, S, S, 3], values in [0, 1].
    ForwardResult forward(const Tensor& query, const Tensor& frames) const;

    const ModelConfig& config() const { return config_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }
    const std::vector<Parameter>& parameters() const { return store_.params(); }
    const std::vector<Box>& anchors() const;

   private:
    const StageBlocks& stage(std::int64_t k) const;
    const DetectionHeads& heads_for(std::int64_t k) const;

    ModelConfig config_;
    ParameterStore store_;
    Backbone backbone_;
    std::vector<StageBlocks> stages_;
    std::vector<DetectionHeads> akg_heads_;
    DetectionHeads prediction_heads_;
    std::vector<QueryRefiner> refiners_;
};

}  // namespace prvql
