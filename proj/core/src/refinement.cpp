#include "prvql/refinement.hpp"

namespace prvql {

const char* qfr_mode_name(QfrMode mode) {
    switch (mode) {
        case QfrMode::kCrossAttention: return "cross-attention";
        case QfrMode::kAddition: return "addition";
        case QfrMode::kConcatenation: return "concatenation";
    }
    return "?";
}

QfrMode parse_qfr_mode(const std::string& name) {
    if (name == "cross-attention") return QfrMode::kCrossAttention;
    if (name == "addition") return QfrMode::kAddition;
    if (name == "concatenation") return QfrMode::kConcatenation;
    throw ConfigError("unknown qfr_mode '" + name + "' (expected cross-attention, addition or concatenation)");
}

QueryRefiner::QueryRefiner(ParameterStore& store, const std::string& name, QfrMode mode,
                           const AttentionConfig& attention, std::int64_t hidden)
    : mode_(mode), channels_(attention.channels) {
    cnb = nn::ConvBlock(store, name + ".cnb", attention.channels, attention.channels, hidden);
    if (mode == QfrMode::kCrossAttention) cab = CrossAttentionBlock(store, name + ".cab", attention);
    if (mode == QfrMode::kConcatenation)
        project = nn::Linear(store, name + ".project", 2 * attention.channels, attention.channels);
}

Tensor QueryRefiner::knowledge_tokens(const AppearanceKnowledge& knowledge) const {
    const Tensor& rois = knowledge.rois;
    if (rois.dim() != 4 || rois.shape()[3] != channels_)
        throw DimensionError("qfr: knowledge " + shape_str(rois.shape()) + " does not have " +
                             std::to_string(channels_) + " channels");
    return ops::reshape(cnb(rois), {-1, channels_});
}

Tensor QueryRefiner::operator()(const Tensor& query, const AppearanceKnowledge& knowledge) const {
    if (knowledge.count() == 0) return query;
    if (query.dim() != 2 || query.shape()[1] != channels_)
        throw DimensionError("qfr: query tokens " + shape_str(query.shape()) + " do not have " +
                             std::to_string(channels_) + " channels");
    const Tensor tokens = knowledge_tokens(knowledge);
    switch (mode_) {
        case QfrMode::kCrossAttention:
            return cab(query, tokens).features;
        case QfrMode::kAddition:
            return ops::add(query, ops::mean(tokens, 0, true));
        case QfrMode::kConcatenation: {
            const std::vector<std::int64_t> rows(static_cast<std::size_t>(query.shape()[0]), 0);
            const Tensor tiled = ops::index_select(ops::mean(tokens, 0, true), 0, rows);
            const Tensor parts[] = {query, tiled};
            return project(ops::concat(parts, 1));
        }
    }
    return query;
}

Tensor refine_video(const Tensor& saliency, const Tensor& video, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (video.dim() != 3 || saliency.dim() != 2 || saliency.shape()[0] != video.shape()[0] ||
        saliency.shape()[1] != video.shape()[1])
        throw DimensionError("vfr: saliency " + shape_str(saliency.shape()) + " vs video " + shape_str(video.shape()));
    const Tensor gate = ops::reshape(ops::add_scalar(saliency, -1.0), {saliency.shape()[0], saliency.shape()[1], 1});
    return ops::add(video, ops::scale(ops::mul(gate, video), beta));
}

}  // namespace prvql
