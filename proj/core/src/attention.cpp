#include "prvql/attention.hpp"

#include <cmath>
#include <cstdlib>

namespace prvql {

TemporalMask::TemporalMask(std::int64_t frames, std::int64_t tokens_per_frame, std::int64_t radius)
    : frames_(frames), hw_(tokens_per_frame), radius_(radius) {
    if (radius < 0) throw ConfigError("temporal window radius must be >= 0, got " + std::to_string(radius));
    if (frames < 1 || tokens_per_frame < 1) throw ConfigError("temporal mask needs at least one frame and token");
}

bool TemporalMask::allowed(std::int64_t p, std::int64_t q) const {
    return std::llabs(p / hw_ - q / hw_) <= radius_;
}

const Tensor& TemporalMask::additive(DType dtype) const {
    Tensor& slot = cache_[dtype == DType::kFloat64 ? 1 : 0];
    if (!slot.defined()) {
        const auto n = size();
        Tensor m = Tensor::zeros({n, n}, dtype);
        visit_dtype(dtype, [&]<typename T>() {
            T* p = m.mutable_data<T>();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    if (!allowed(i, j)) p[i * n + j] = static_cast<T>(ops::kMaskedLogit);
        });
        slot = m;
    }
    return slot;
}

AttentionLayer::AttentionLayer(ParameterStore& store, const std::string& name, std::int64_t channels,
                               std::int64_t heads, std::int64_t ffn_hidden, bool cross)
    : channels_(channels), heads_(heads), cross_(cross) {
    if (heads < 1 || channels % heads != 0)
        throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide channels (" +
                          std::to_string(channels) + ")");
    norm_q_ = nn::LayerNorm(store, name + ".norm_q", channels);
    if (cross) norm_kv_ = nn::LayerNorm(store, name + ".norm_kv", channels);
    wq_ = nn::Linear(store, name + ".wq", channels, channels);
    wk_ = nn::Linear(store, name + ".wk", channels, channels);
    wv_ = nn::Linear(store, name + ".wv", channels, channels);
    wo_ = nn::Linear(store, name + ".wo", channels, channels);
    norm_ff_ = nn::LayerNorm(store, name + ".norm_ff", channels);
    ffn_ = nn::FeedForward(store, name + ".ffn", channels, ffn_hidden);
}

AttentionOutput AttentionLayer::operator()(const Tensor& z, const Tensor& kv, const Tensor& mask) const {
    if (z.dim() < 2 || z.shape().back() != channels_)
        throw DimensionError("attention: query tokens " + shape_str(z.shape()) + " do not have " +
                             std::to_string(channels_) + " channels");
    if (cross_) {
        if (!kv.defined() || kv.dim() != 2 || kv.shape()[1] != channels_)
            throw DimensionError("attention: key tokens must be [n_k, " + std::to_string(channels_) + "], got " +
                                 (kv.defined() ? shape_str(kv.shape()) : std::string("none")));
    }

    const Tensor zn = norm_q_(z);
    const Tensor kvn = cross_ ? norm_kv_(kv) : zn;
    const Tensor q = wq_(zn), k = wk_(kvn), v = wv_(kvn);
    const std::int64_t d = channels_ / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
    const std::int64_t last = z.dim() - 1;

    std::vector<Tensor> outs;
    Tensor attn;
    for (std::int64_t h = 0; h < heads_; ++h) {
        const Tensor qh = heads_ > 1 ? ops::slice(q, last, h * d, (h + 1) * d) : q;
        const Tensor kh = heads_ > 1 ? ops::slice(k, k.dim() - 1, h * d, (h + 1) * d) : k;
        const Tensor vh = heads_ > 1 ? ops::slice(v, v.dim() - 1, h * d, (h + 1) * d) : v;
        Tensor logits = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
        if (mask.defined()) logits = ops::add(logits, mask);
        const Tensor a = ops::softmax(logits, -1);
        outs.push_back(ops::matmul(a, vh));
        attn = attn.defined() ? ops::add(attn, a) : a;
    }
    const Tensor mixed = heads_ > 1 ? ops::concat(outs, last) : outs[0];
    if (heads_ > 1) attn = ops::scale(attn, 1.0 / static_cast<double>(heads_));
    const Tensor x = ops::add(z, wo_(mixed));
    return {ops::add(x, ffn_(norm_ff_(x))), attn};
}

CrossAttentionBlock::CrossAttentionBlock(ParameterStore& store, const std::string& name,
                                         const AttentionConfig& config) {
    if (config.depth < 1) throw ConfigError("attention depth must be >= 1");
    for (std::int64_t i = 0; i < config.depth; ++i)
        layers_.emplace_back(store, name + ".layer" + std::to_string(i), config.channels, config.heads,
                             config.channels * config.ffn_ratio, true);
}

AttentionOutput CrossAttentionBlock::operator()(const Tensor& z, const Tensor& u) const {
    AttentionOutput out{z, {}};
    for (const auto& layer : layers_) out = layer(out.features, u);
    return out;
}

MaskedSelfAttention::MaskedSelfAttention(ParameterStore& store, const std::string& name,
                                         const AttentionConfig& config) {
    if (config.depth < 1) throw ConfigError("attention depth must be >= 1");
    for (std::int64_t i = 0; i < config.depth; ++i)
        layers_.emplace_back(store, name + ".layer" + std::to_string(i), config.channels, config.heads,
                             config.channels * config.ffn_ratio, false);
}

AttentionOutput MaskedSelfAttention::operator()(const Tensor& x, const TemporalMask& mask) const {
    if (x.dim() != 2 || x.shape()[0] != mask.size())
        throw DimensionError("masked self-attention: tokens " + shape_str(x.shape()) + " vs mask over " +
                             std::to_string(mask.size()));
    const Tensor& additive = mask.additive(x.dtype());
    AttentionOutput out{x, {}};
    for (const auto& layer : layers_) out = layer(out.features, {}, additive);
    out.attn = ops::reshape(out.attn, {mask.frames(), mask.tokens_per_frame(), mask.size()});
    return out;
}

AttentionOutput fuse_video(const CrossAttentionBlock& cab, const Tensor& video, const Tensor& query) {
    if (video.dim() != 3) throw DimensionError("fuse_video expects video tokens [L, HW, C], got " + shape_str(video.shape()));
    return cab(video, query);
}

DownsampleEmbed::DownsampleEmbed(ParameterStore& store, const std::string& name, std::int64_t channels,
                                 std::int64_t in_h, std::int64_t in_w, std::int64_t factor, std::int64_t kernel,
                                 std::int64_t max_frames)
    : in_h_(in_h), in_w_(in_w), factor_(factor) {
    if (factor < 1 || in_h % factor != 0 || in_w % factor != 0)
        throw ConfigError("feature grid " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                          " is not divisible by downsample factor " + std::to_string(factor));
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("downsample kernel must be odd");
    conv = nn::Conv2d(store, name + ".conv", kernel, channels, channels, factor);
    spatial = store.uniform_range(name + ".pos_spatial", {(in_h / factor) * (in_w / factor), channels}, 0.02);
    temporal = store.uniform_range(name + ".pos_temporal", {max_frames, channels}, 0.02);
}

Tensor DownsampleEmbed::operator()(const Tensor& x) const {
    if (x.dim() != 4 || x.shape()[1] != in_h_ || x.shape()[2] != in_w_)
        throw DimensionError("downsample expects [L, " + std::to_string(in_h_) + ", " + std::to_string(in_w_) +
                             ", C], got " + shape_str(x.shape()));
    const auto L = x.shape()[0], C = x.shape()[3];
    if (L > temporal.shape()[0])
        throw ConfigError("clip of " + std::to_string(L) + " frames exceeds max_frames " +
                          std::to_string(temporal.shape()[0]));
    const auto h = in_h_ / factor_, w = in_w_ / factor_;
    Tensor y = conv(x);
    y = ops::add(y, ops::reshape(spatial, {h, w, C}));
    return ops::add(y, ops::reshape(ops::slice(temporal, 0, 0, L), {L, 1, 1, C}));
}

}  // namespace prvql
