#include "prvql/model.hpp"

#include <functional>
#include <map>

#include <json.hpp>

namespace prvql {

using nlohmann::json;

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    require(stages >= 1, "stages must be >= 1");
    require(patch >= 1, "patch must be >= 1");
    require(frame_side >= 1 && frame_side % patch == 0, "frame_side must be a positive multiple of patch");
    require(query_side >= 1 && query_side % patch == 0, "query_side must be a positive multiple of patch");
    require(channels >= 2 && channels % 2 == 0, "channels must be even");
    require(heads >= 1 && channels % heads == 0, "heads must divide channels");
    require(backbone_depth >= 0, "backbone_depth must be >= 0");
    require(cab_depth >= 1 && msa_depth >= 1, "attention depth must be >= 1");
    require(ffn_ratio >= 1, "ffn_ratio must be >= 1");
    require(downsample >= 1 && grid() % downsample == 0, "feature grid must be divisible by downsample");
    require(downsample_kernel >= 1 && downsample_kernel % 2 == 1, "downsample_kernel must be odd");
    require(max_frames >= 1, "max_frames must be >= 1");
    require(window >= 0, "window must be >= 0");
    require(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
    require(top_n >= 1, "top_n must be >= 1");
    require(roi_pool >= 1, "roi_pool must be >= 1");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
    require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
    require(head_hidden >= 1, "head_hidden must be >= 1");
    require(offset_scale > 0.0, "offset_scale must be positive");
    require(!anchors.scales.empty() && !anchors.ratios.empty(), "anchors need scales and ratios");
}

namespace {

template <class T>
T typed(const json& value, const std::string& key) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!value.is_boolean()) throw ConfigError("");
        } else if constexpr (std::is_integral_v<T>) {
            if (!value.is_number_integer()) throw ConfigError("");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!value.is_number()) throw ConfigError("");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!value.is_string()) throw ConfigError("");
        }
        return value.get<T>();
    } catch (const std::exception&) {
        throw ConfigError("model config: wrong type for '" + key + "'");
    }
}

std::vector<double> number_list(const json& value, const std::string& key) {
    if (!value.is_array() || value.empty()) throw ConfigError("model config: '" + key + "' must be a non-empty array");
    std::vector<double> out;
    for (const auto& v : value) out.push_back(typed<double>(v, key));
    return out;
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text, const ModelConfig& base) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("model config must be a JSON object");
    ModelConfig c = base;
    using Setter = std::function<void(const json&)>;
    const std::map<std::string, Setter> setters = {
        {"stages", [&](const json& v) { c.stages = typed<std::int64_t>(v, "stages"); }},
        {"frame_side", [&](const json& v) { c.frame_side = typed<std::int64_t>(v, "frame_side"); }},
        {"query_side", [&](const json& v) { c.query_side = typed<std::int64_t>(v, "query_side"); }},
        {"patch", [&](const json& v) { c.patch = typed<std::int64_t>(v, "patch"); }},
        {"channels", [&](const json& v) { c.channels = typed<std::int64_t>(v, "channels"); }},
        {"backbone_depth", [&](const json& v) { c.backbone_depth = typed<std::int64_t>(v, "backbone_depth"); }},
        {"heads", [&](const json& v) { c.heads = typed<std::int64_t>(v, "heads"); }},
        {"cab_depth", [&](const json& v) { c.cab_depth = typed<std::int64_t>(v, "cab_depth"); }},
        {"msa_depth", [&](const json& v) { c.msa_depth = typed<std::int64_t>(v, "msa_depth"); }},
        {"ffn_ratio", [&](const json& v) { c.ffn_ratio = typed<std::int64_t>(v, "ffn_ratio"); }},
        {"downsample", [&](const json& v) { c.downsample = typed<std::int64_t>(v, "downsample"); }},
        {"downsample_kernel", [&](const json& v) { c.downsample_kernel = typed<std::int64_t>(v, "downsample_kernel"); }},
        {"max_frames", [&](const json& v) { c.max_frames = typed<std::int64_t>(v, "max_frames"); }},
        {"window", [&](const json& v) { c.window = typed<std::int64_t>(v, "window"); }},
        {"tau", [&](const json& v) { c.tau = typed<double>(v, "tau"); }},
        {"top_n", [&](const json& v) { c.top_n = typed<std::int64_t>(v, "top_n"); }},
        {"roi_pool", [&](const json& v) { c.roi_pool = typed<std::int64_t>(v, "roi_pool"); }},
        {"alpha", [&](const json& v) { c.alpha = typed<double>(v, "alpha"); }},
        {"beta", [&](const json& v) { c.beta = typed<double>(v, "beta"); }},
        {"qfr_mode", [&](const json& v) { c.qfr_mode = parse_qfr_mode(typed<std::string>(v, "qfr_mode")); }},
        {"head_hidden", [&](const json& v) { c.head_hidden = typed<std::int64_t>(v, "head_hidden"); }},
        {"offset_scale", [&](const json& v) { c.offset_scale = typed<double>(v, "offset_scale"); }},
        {"anchor_scales", [&](const json& v) { c.anchors.scales = number_list(v, "anchor_scales"); }},
        {"anchor_ratios", [&](const json& v) { c.anchors.ratios = number_list(v, "anchor_ratios"); }},
        {"tie_weights", [&](const json& v) { c.tie_weights = typed<bool>(v, "tie_weights"); }},
        {"akg_enabled", [&](const json& v) { c.akg_enabled = typed<bool>(v, "akg_enabled"); }},
        {"skg_enabled", [&](const json& v) { c.skg_enabled = typed<bool>(v, "skg_enabled"); }},
    };
    for (const auto& [key, value] : doc.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("model config: unknown key '" + key + "'");
        it->second(value);
    }
    c.validate();
    return c;
}

std::string model_config_to_json(const ModelConfig& c) {
    json doc = {
        {"stages", c.stages},
        {"frame_side", c.frame_side},
        {"query_side", c.query_side},
        {"patch", c.patch},
        {"channels", c.channels},
        {"backbone_depth", c.backbone_depth},
        {"heads", c.heads},
        {"cab_depth", c.cab_depth},
        {"msa_depth", c.msa_depth},
        {"ffn_ratio", c.ffn_ratio},
        {"downsample", c.downsample},
        {"downsample_kernel", c.downsample_kernel},
        {"max_frames", c.max_frames},
        {"window", c.window},
        {"tau", c.tau},
        {"top_n", c.top_n},
        {"roi_pool", c.roi_pool},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"qfr_mode", qfr_mode_name(c.qfr_mode)},
        {"head_hidden", c.head_hidden},
        {"offset_scale", c.offset_scale},
        {"anchor_scales", c.anchors.scales},
        {"anchor_ratios", c.anchors.ratios},
        {"tie_weights", c.tie_weights},
        {"akg_enabled", c.akg_enabled},
        {"skg_enabled", c.skg_enabled},
    };
    return doc.dump(2);
}

Backbone::Backbone(ParameterStore& store, const ModelConfig& config)
    : patch_(config.patch), grid_(config.grid()), channels_(config.channels) {
    const auto p = config.patch, C = config.channels;
    patch_weight = store.uniform("backbone.patch.weight", {p, p, 3, C}, p * p * 3);
    patch_bias = store.constant("backbone.patch.bias", {C}, 0.0);
    pos = store.uniform_range("backbone.pos", {grid_ * grid_, C}, 0.02);
    for (std::int64_t i = 0; i < config.backbone_depth; ++i)
        layers_.emplace_back(store, "backbone.layer" + std::to_string(i), C, config.heads, C * config.ffn_ratio, false);
    norm_ = nn::LayerNorm(store, "backbone.norm", C);
}

Tensor Backbone::operator()(const Tensor& images) const {
    if (images.dim() != 4 || images.shape()[3] != 3 || images.shape()[1] != images.shape()[2])
        throw DimensionError("backbone expects [N, S, S, 3] images, got " + shape_str(images.shape()));
    const auto N = images.shape()[0], S = images.shape()[1];
    if (S % patch_ != 0)
        throw ConfigError("image side " + std::to_string(S) + " is not divisible by patch " + std::to_string(patch_));
    const auto g = S / patch_;
    Tensor x = ops::reshape(ops::conv2d(images, patch_weight, patch_bias, patch_, 0), {N, g * g, channels_});
    Tensor p = pos;
    if (g != grid_)
        p = ops::reshape(ops::bilinear_resize(ops::reshape(pos, {1, grid_, grid_, channels_}), g, g), {g * g, channels_});
    x = ops::add(x, p);
    for (const auto& layer : layers_) x = layer(x, {}).features;
    return norm_(x);
}

PrvqlModel::PrvqlModel(const ModelConfig& config, std::uint64_t seed) : config_(config), store_(seed) {
    config_.validate();
    const auto& c = config_;
    backbone_ = Backbone(store_, c);
    const AttentionConfig attn{c.channels, c.heads, c.cab_depth, c.ffn_ratio};
    const AttentionConfig self_attn{c.channels, c.heads, c.msa_depth, c.ffn_ratio};
    const std::int64_t distinct = c.tie_weights ? 1 : c.stages;
    for (std::int64_t k = 0; k < distinct; ++k) {
        const std::string name = "stage" + std::to_string(k + 1);
        stages_.push_back({CrossAttentionBlock(store_, name + ".fuse", attn),
                           DownsampleEmbed(store_, name + ".down", c.channels, c.grid(), c.grid(), c.downsample,
                                           c.downsample_kernel, c.max_frames),
                           MaskedSelfAttention(store_, name + ".msa", self_attn)});
    }
    const DetectionHeads::Geometry geom{c.grid(), c.grid(), static_cast<double>(c.frame_side), c.offset_scale};
    prediction_heads_ = DetectionHeads(store_, "pred_heads", c.channels, c.head_hidden, c.anchors, geom);
    if (!c.tie_weights)
        for (std::int64_t k = 0; k + 1 < c.stages; ++k)
            akg_heads_.emplace_back(store_, "stage" + std::to_string(k + 1) + ".akg_heads", c.channels, c.head_hidden,
                                    c.anchors, geom);
    for (std::int64_t k = 0; k + 1 < c.stages; ++k)
        refiners_.emplace_back(store_, "stage" + std::to_string(k + 1) + ".qfr", c.qfr_mode, attn, c.head_hidden);
}

const StageBlocks& PrvqlModel::stage(std::int64_t k) const {
    return stages_[config_.tie_weights ? 0 : static_cast<std::size_t>(k)];
}

const DetectionHeads& PrvqlModel::heads_for(std::int64_t k) const {
    if (k + 1 == config_.stages || config_.tie_weights) return prediction_heads_;
    return akg_heads_[static_cast<std::size_t>(k)];
}

const std::vector<Box>& PrvqlModel::anchors() const { return prediction_heads_.anchors(); }

ForwardResult PrvqlModel::forward(const Tensor& query, const Tensor& frames) const {
    const auto& c = config_;
    if (frames.dim() != 4 || frames.shape()[1] != c.frame_side || frames.shape()[2] != c.frame_side ||
        frames.shape()[3] != 3)
        throw DimensionError("frames must be [L, " + std::to_string(c.frame_side) + ", " +
                             std::to_string(c.frame_side) + ", 3], got " + shape_str(frames.shape()));
    if (query.dim() != 3 || query.shape()[0] != c.query_side || query.shape()[1] != c.query_side || query.shape()[2] != 3)
        throw DimensionError("query must be [" + std::to_string(c.query_side) + ", " + std::to_string(c.query_side) +
                             ", 3], got " + shape_str(query.shape()));
    const auto L = frames.shape()[0], C = c.channels, G = c.grid(), g = c.down_grid(), Gq = c.query_grid();
    if (L > c.max_frames)
        throw ConfigError("clip of " + std::to_string(L) + " frames exceeds max_frames " + std::to_string(c.max_frames));

    const Tensor q1 = ops::reshape(backbone_(ops::reshape(query, {1, c.query_side, c.query_side, 3})), {Gq * Gq, C});
    const Tensor v1 = backbone_(frames);
    const TemporalMask mask(L, g * g, c.window);
    const AkgConfig akg{c.tau, c.top_n, c.roi_pool, static_cast<double>(c.frame_side)};
    const SkgGeometry skg{G, G, g, g, Gq, Gq};

    ForwardResult result;
    Tensor q = q1, v = v1;
    for (std::int64_t k = 0; k < c.stages; ++k) {
        const StageBlocks& blocks = stage(k);
        StageState st;
        st.query = q;
        st.video = v;
        const AttentionOutput fused = fuse_video(blocks.fuse, v, q);
        ++result.counters.fusion_calls;
        st.fused = fused.features;
        st.cross_attn = fused.attn;
        const Tensor down = blocks.down(ops::reshape(st.fused, {L, G, G, C}));
        const AttentionOutput enhanced = blocks.msa(ops::reshape(down, {L * g * g, C}), mask);
        ++result.counters.msa_calls;
        st.enhanced = enhanced.features;
        st.temporal_attn = enhanced.attn;
        st.heads = heads_for(k)(ops::reshape(st.enhanced, {L, g, g, C}));
        ++result.counters.head_calls;

        if (k + 1 < c.stages) {
            AppearanceKnowledge appearance;
            if (c.akg_enabled) {
                appearance = appearance_knowledge(st.heads, ops::reshape(v, {L, G, G, C}), akg);
                ++result.counters.akg_calls;
            }
            q = refiners_[static_cast<std::size_t>(k)](q, appearance);
            ++result.counters.qfr_calls;
            st.appearance = std::move(appearance);
            if (c.skg_enabled) {
                SpatialKnowledge spatial = spatial_knowledge(st.cross_attn, st.temporal_attn, c.alpha, skg);
                ++result.counters.skg_calls;
                v = refine_video(spatial.saliency, v1, c.beta);
                ++result.counters.vfr_calls;
                st.spatial = std::move(spatial);
            }
        }
        result.stages.push_back(std::move(st));
    }
    return result;
}

}  // namespace prvql
