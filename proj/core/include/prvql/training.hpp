#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prvql/model.hpp"
#include "prvql/synthetic.hpp"

namespace prvql {

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct TargetConfig {
    double positive_iou = 0.5;
    double negative_iou = 0.4;
};

// Per frame, per anchor labels. Positives are matched to the frame's GT box.
struct AnchorTargets {
    std::int64_t frames = 0, anchors = 0;
    std::vector<AnchorLabel> labels;     // [frames * anchors]
    std::vector<std::optional<Box>> gt;  // per frame

    AnchorLabel label(std::int64_t frame, std::int64_t anchor) const {
        return labels[static_cast<std::size_t>(frame * anchors + anchor)];
    }
    std::vector<std::int64_t> positives(std::int64_t frame) const;
    std::vector<std::int64_t> negatives(std::int64_t frame) const;
    std::int64_t positive_count() const;
};

// IoU >= positive_iou is positive, plus the best-matching anchor (lowest
// index on ties); IoU < negative_iou negative; the rest ignored. Frames
// without a GT box are all negative.
AnchorTargets assign_targets(const std::vector<Box>& anchors, const std::vector<std::optional<Box>>& gt,
                             const TargetConfig& config = {});

struct MiningConfig {
    double ratio = 3.0;
    std::int64_t min_per_frame = 8;
};

// Per frame: negatives by descending score (ties by index), keeping
// max(min_per_frame, ceil(ratio * positives)) of them. scores: [frames * anchors].
std::vector<std::vector<std::int64_t>> hard_negative_mining(const std::vector<double>& scores,
                                                            const AnchorTargets& targets,
                                                            const MiningConfig& config = {});

// Differentiable generalized IoU of matching rows of [P, 4] box tensors.
// Boxes must be ordered (x1 <= x2, y1 <= y2) with nonzero union.
Tensor giou_tensor(const Tensor& pred, const Tensor& target);

struct LossConfig {
    double lambda_giou = 0.3;
    double lambda_bce = 100.0;
    double frame_side = 96;
    TargetConfig targets;
    MiningConfig mining;
};

struct StageLoss {
    Tensor total;  // scalar, on the tape
    double l1 = 0, giou = 0, bce = 0;
    std::int64_t positives = 0, mined = 0;
};

// L1 on side-normalized coordinates (summed over the four, averaged over
// positives) + lambda_giou * mean(1 - giou) over positives + lambda_bce *
// mean BCE over positives and mined negatives. Throws NumericError naming
// the term when a value is not finite; `stage` only labels that message.
StageLoss stage_loss(const HeadOutput& heads, const AnchorTargets& targets, const LossConfig& config,
                     std::int64_t stage = 0);

struct TotalLoss {
    Tensor total;
    std::vector<StageLoss> stages;
};

TotalLoss total_loss(const ForwardResult& result, const AnchorTargets& targets, const LossConfig& config);

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 5e-2;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
};

// Decoupled weight decay (w <- w * (1 - lr * wd)) followed by the
// bias-corrected Adam step. Moments are kept in double precision.
class AdamW {
   public:
    AdamW(std::vector<Parameter> params, const AdamWConfig& config = {});

    // Applies one update from the accumulated gradients with learning rate `lr`.
    void step(double lr);
    void step() { step(config_.lr); }
    std::int64_t steps() const { return t_; }
    const AdamWConfig& config() const { return config_; }
    const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

   private:
    std::vector<Parameter> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// Sorted frame indices for a training clip. Draws `length` distinct frames
// uniformly, redrawing up to 32 times until one lies in the response track;
// after that a random track frame replaces a random drawn one.
std::vector<std::int64_t> sample_clip(const QueryVideoPair& pair, std::int64_t length, Rng& rng);

struct TrainConfig {
    std::int64_t iterations = 500;
    std::int64_t clip_length = 8;
    std::int64_t batch = 1;  // pairs accumulated per update
    std::int64_t warmup = 0;  // linear warmup iterations
    AdamWConfig optim;
    LossConfig loss;
    std::uint64_t seed = 0;
    std::filesystem::path log_path;      // loss CSV; empty disables
    std::filesystem::path checkpoint_dir;  // empty disables
    std::int64_t checkpoint_every = 0;   // 0: final checkpoint only
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text, const TrainConfig& base = {});

struct IterationLog {
    std::int64_t iteration = 0;  // 1-based
    std::vector<double> stage_losses;
    double total = 0;
};

struct TrainResult {
    std::vector<IterationLog> log;
    std::vector<std::filesystem::path> checkpoints;
};

using TrainCallback = std::function<void(const IterationLog&)>;

// Pairs are visited in a per-epoch shuffled order drawn from the seed. The
// loss CSV has header `iter,stage_1..stage_K,total`.
TrainResult train(PrvqlModel& model, const std::vector<QueryVideoPair>& dataset, const TrainConfig& config,
                  const TrainCallback& on_iteration = {});

}  // namespace prvql
