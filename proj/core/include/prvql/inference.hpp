#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "prvql/model.hpp"
#include "prvql/synthetic.hpp"
#include "prvql/track.hpp"

namespace prvql {

struct InferenceConfig {
    double peak_ratio = 0.79;
    double extend_ratio = 0.585;
    std::int64_t median_kernel = 1;
};

// Odd-sized running median; the window shrinks at the clip edges.
std::vector<double> median_filter(const std::vector<double>& scores, std::int64_t kernel);

// Local maxima. A maximal constant run counts once, at its last frame.
std::vector<std::int64_t> find_peaks(const std::vector<double>& scores);

// Most recent confident peak extended in both directions while the score
// stays at or above extend_ratio * peak. Empty when every score is <= 0.
std::optional<ResponseTrack> infer_track(const std::vector<double>& scores, const std::vector<Box>& boxes,
                                         const InferenceConfig& config = {});

// |intersection| / |union| of inclusive integer frame intervals.
double temporal_iou(std::int64_t a_start, std::int64_t a_end, std::int64_t b_start, std::int64_t b_end);
// Summed per-frame box intersections over summed unions across both tubes.
double tube_stiou(const ResponseTrack& pred, const ResponseTrack& gt);

struct Detection {
    double confidence = 0;
    bool true_positive = false;
    std::string pair_id;
};

// Every-point AP: sorted by confidence (ties by pair id), the mean over
// ground truths of precision at each true positive.
double average_precision(std::vector<Detection> detections, std::int64_t num_gt);

struct Prediction {
    std::string pair_id;
    std::optional<ResponseTrack> track;
};

struct PairDiagnostics {
    std::string pair_id;
    bool predicted = false;
    double tiou = 0, stiou = 0, recovery = 0, score = 0;
};

struct EvalReport {
    double tap25 = 0, stap25 = 0;
    double recovery = 0, success = 0;  // percent
    std::vector<PairDiagnostics> pairs;
};

struct GroundTruthTrack {
    std::string pair_id;
    ResponseTrack track;
};

// Predictions are matched to ground truth by pair id; unmatched ground truth
// counts as a miss and predictions for unknown pairs are ignored.
EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<GroundTruthTrack>& gts);

std::string prediction_to_json(const Prediction& prediction);
Prediction prediction_from_json(const std::string& line);
void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
std::string report_to_json(const EvalReport& report);

struct FrameScores {
    std::vector<double> scores;
    std::vector<Box> boxes;
};

// Runs the model on the whole clip and reads the final-stage best anchor per frame.
FrameScores score_frames(const PrvqlModel& model, const QueryVideoPair& pair);
Prediction predict_pair(const PrvqlModel& model, const QueryVideoPair& pair, const InferenceConfig& config = {});
std::vector<GroundTruthTrack> ground_truth_tracks(const std::vector<QueryVideoPair>& pairs);

}  // namespace prvql
