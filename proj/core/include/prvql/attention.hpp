#pragma once

#include <cstdint>
#include <vector>

#include "prvql/core/nn.hpp"

namespace prvql {

struct AttentionOutput {
    Tensor features;
    // Post-softmax weights, averaged over heads.
    Tensor attn;
};

// Frame-windowed visibility over L*hw tokens: token p may attend to q iff
// their frames are at most `radius` apart.
class TemporalMask {
   public:
    TemporalMask(std::int64_t frames, std::int64_t tokens_per_frame, std::int64_t radius);

    std::int64_t frames() const { return frames_; }
    std::int64_t tokens_per_frame() const { return hw_; }
    std::int64_t radius() const { return radius_; }
    std::int64_t size() const { return frames_ * hw_; }
    bool allowed(std::int64_t p, std::int64_t q) const;
    // [N,N] additive mask: 0 where allowed, kMaskedLogit elsewhere. Cached per dtype.
    const Tensor& additive(DType dtype) const;

   private:
    std::int64_t frames_, hw_, radius_;
    mutable Tensor cache_[2];
};

// One pre-norm attention layer: x + Wo*Attn(LN(x), LN(kv)), then x + FFN(LN(x)).
class AttentionLayer {
   public:
    AttentionLayer() = default;
    AttentionLayer(ParameterStore& store, const std::string& name, std::int64_t channels, std::int64_t heads,
                   std::int64_t ffn_hidden, bool cross);

    // z: [..., n_q, C]; kv: [n_k, C] shared across the leading dims of z.
    // Self-attention layers ignore kv and attend within each [n, C] slice of z.
    // `mask` is an optional additive [n_q, n_k] tensor.
    AttentionOutput operator()(const Tensor& z, const Tensor& kv, const Tensor& mask = {}) const;

    std::int64_t channels() const { return channels_; }

   private:
    std::int64_t channels_ = 0, heads_ = 1;
    bool cross_ = false;
    nn::LayerNorm norm_q_, norm_kv_, norm_ff_;
    nn::Linear wq_, wk_, wv_, wo_;
    nn::FeedForward ffn_;
};

struct AttentionConfig {
    std::int64_t channels = 64;
    std::int64_t heads = 1;
    std::int64_t depth = 1;
    std::int64_t ffn_ratio = 2;
};

// Cross-attention block: query tokens z attend to key tokens u. With depth > 1
// layers are stacked and the last layer's map is returned.
class CrossAttentionBlock {
   public:
    CrossAttentionBlock() = default;
    CrossAttentionBlock(ParameterStore& store, const std::string& name, const AttentionConfig& config);

    // z: [..., n_q, C], u: [n_k, C] -> features like z, attn [..., n_q, n_k].
    AttentionOutput operator()(const Tensor& z, const Tensor& u) const;

   private:
    std::vector<AttentionLayer> layers_;
};

// Self-attention over all video tokens under a TemporalMask.
class MaskedSelfAttention {
   public:
    MaskedSelfAttention() = default;
    MaskedSelfAttention(ParameterStore& store, const std::string& name, const AttentionConfig& config);

    // x: [L*hw, C] -> features [L*hw, C], attn [L, hw, L*hw].
    AttentionOutput operator()(const Tensor& x, const TemporalMask& mask) const;

   private:
    std::vector<AttentionLayer> layers_;
};

// Per-frame fusion of video tokens with query tokens through one shared CAB.
// video: [L, HW, C], query: [HW_q, C] -> features [L, HW, C], attn [L, HW, HW_q].
AttentionOutput fuse_video(const CrossAttentionBlock& cab, const Tensor& video, const Tensor& query);

// Strided conv plus a learned spatio-temporal position embedding.
class DownsampleEmbed {
   public:
    DownsampleEmbed() = default;
    DownsampleEmbed(ParameterStore& store, const std::string& name, std::int64_t channels, std::int64_t in_h,
                    std::int64_t in_w, std::int64_t factor, std::int64_t kernel, std::int64_t max_frames);

    // x: [L, H, W, C] -> [L, H/factor, W/factor, C].
    Tensor operator()(const Tensor& x) const;

    nn::Conv2d conv;
    Tensor spatial;   // [h*w, C]
    Tensor temporal;  // [max_frames, C]

   private:
    std::int64_t in_h_ = 0, in_w_ = 0, factor_ = 1;
};

}  // namespace prvql
