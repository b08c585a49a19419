#pragma once

#include <string>

#include "prvql/attention.hpp"
#include "prvql/knowledge.hpp"

namespace prvql {

enum class QfrMode { kCrossAttention, kAddition, kConcatenation };

const char* qfr_mode_name(QfrMode mode);
// Accepts "cross-attention", "addition", "concatenation".
QfrMode parse_qfr_mode(const std::string& name);

// Refines query tokens with appearance knowledge.
class QueryRefiner {
   public:
    QueryRefiner() = default;
    QueryRefiner(ParameterStore& store, const std::string& name, QfrMode mode, const AttentionConfig& attention,
                 std::int64_t hidden);

    // query: [HW_q, C]. Empty knowledge returns `query` unchanged.
    Tensor operator()(const Tensor& query, const AppearanceKnowledge& knowledge) const;
    // Knowledge tokens after the ConvBlock: [n' * P * P, C].
    Tensor knowledge_tokens(const AppearanceKnowledge& knowledge) const;

    QfrMode mode() const { return mode_; }

    nn::ConvBlock cnb;
    CrossAttentionBlock cab;
    nn::Linear project;

   private:
    QfrMode mode_ = QfrMode::kCrossAttention;
    std::int64_t channels_ = 0;
};

// V1 + beta * (saliency - 1) * V1, i.e. beta * (saliency * V1) + (1 - beta) * V1
// written so that beta = 0 or saliency = 1 reproduce V1 exactly.
// saliency: [L, HW], video: [L, HW, C].
Tensor refine_video(const Tensor& saliency, const Tensor& video, double beta);

}  // namespace prvql
