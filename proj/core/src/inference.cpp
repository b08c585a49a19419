#include "prvql/inference.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <json.hpp>

namespace prvql {

using nlohmann::json;

std::vector<double> median_filter(const std::vector<double>& scores, std::int64_t kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("median kernel must be a positive odd number");
    if (kernel == 1) return scores;
    const auto n = static_cast<std::int64_t>(scores.size()), r = kernel / 2;
    std::vector<double> out(scores.size());
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> window(scores.begin() + std::max<std::int64_t>(0, i - r),
                                   scores.begin() + std::min(n, i + r + 1));
        std::sort(window.begin(), window.end());
        const auto m = window.size();
        out[static_cast<std::size_t>(i)] = m % 2 ? window[m / 2] : 0.5 * (window[m / 2 - 1] + window[m / 2]);
    }
    return out;
}

std::vector<std::int64_t> find_peaks(const std::vector<double>& s) {
    std::vector<std::int64_t> peaks;
    const auto n = static_cast<std::int64_t>(s.size());
    std::int64_t a = 0;
    while (a < n) {
        std::int64_t b = a;
        while (b + 1 < n && s[static_cast<std::size_t>(b + 1)] == s[static_cast<std::size_t>(a)]) ++b;
        const double v = s[static_cast<std::size_t>(a)];
        const bool left = a == 0 || s[static_cast<std::size_t>(a - 1)] < v;
        const bool right = b == n - 1 || s[static_cast<std::size_t>(b + 1)] < v;
        if (left && right) peaks.push_back(b);
        a = b + 1;
    }
    return peaks;
}

std::optional<ResponseTrack> infer_track(const std::vector<double>& raw, const std::vector<Box>& boxes,
                                         const InferenceConfig& config) {
    if (raw.empty()) throw ContractError("infer_track: empty score sequence");
    if (raw.size() != boxes.size()) throw DimensionError("infer_track: scores and boxes differ in length");
    const auto s = median_filter(raw, config.median_kernel);
    const double h = *std::max_element(s.begin(), s.end());
    if (!(h > 0.0)) return std::nullopt;
    std::int64_t peak = -1;
    for (auto p : find_peaks(s))
        if (s[static_cast<std::size_t>(p)] >= config.peak_ratio * h) peak = std::max(peak, p);
    if (peak < 0) return std::nullopt;
    const double top = s[static_cast<std::size_t>(peak)];
    const double floor = config.extend_ratio * top;
    std::int64_t start = peak, end = peak;
    while (start > 0 && s[static_cast<std::size_t>(start - 1)] >= floor) --start;
    while (end + 1 < static_cast<std::int64_t>(s.size()) && s[static_cast<std::size_t>(end + 1)] >= floor) ++end;
    ResponseTrack track{start, end, {}, top};
    for (auto i = start; i <= end; ++i) track.boxes.push_back(boxes[static_cast<std::size_t>(i)]);
    return track;
}

double temporal_iou(std::int64_t a_start, std::int64_t a_end, std::int64_t b_start, std::int64_t b_end) {
    const auto inter = std::max<std::int64_t>(0, std::min(a_end, b_end) - std::max(a_start, b_start) + 1);
    const auto uni = (a_end - a_start + 1) + (b_end - b_start + 1) - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

double tube_stiou(const ResponseTrack& pred, const ResponseTrack& gt) {
    double inter = 0, uni = 0;
    for (auto f = std::min(pred.start, gt.start); f <= std::max(pred.end, gt.end); ++f) {
        const bool p = pred.contains(f), g = gt.contains(f);
        if (p && g) {
            const double i = intersection_area(pred.box_at(f), gt.box_at(f));
            inter += i;
            uni += pred.box_at(f).area() + gt.box_at(f).area() - i;
        } else if (p) {
            uni += pred.box_at(f).area();
        } else if (g) {
            uni += gt.box_at(f).area();
        }
    }
    return uni > 0 ? inter / uni : 0.0;
}

double average_precision(std::vector<Detection> detections, std::int64_t num_gt) {
    if (num_gt <= 0) return 0.0;
    std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.pair_id < b.pair_id;
    });
    double ap = 0;
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < detections.size(); ++i) {
        if (!detections[i].true_positive) continue;
        ++tp;
        ap += static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    return ap / static_cast<double>(num_gt);
}

EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<GroundTruthTrack>& gts) {
    std::map<std::string, const Prediction*> by_id;
    for (const auto& p : predictions) by_id[p.pair_id] = &p;
    EvalReport report;
    std::vector<Detection> temporal, spatial;
    double recovery = 0, success = 0;
    for (const auto& gt : gts) {
        PairDiagnostics d{gt.pair_id};
        auto it = by_id.find(gt.pair_id);
        if (it != by_id.end() && it->second->track) {
            const ResponseTrack& pred = *it->second->track;
            d.predicted = true;
            d.score = pred.score;
            d.tiou = temporal_iou(pred.start, pred.end, gt.track.start, gt.track.end);
            d.stiou = tube_stiou(pred, gt.track);
            std::int64_t hits = 0;
            for (auto f = gt.track.start; f <= gt.track.end; ++f)
                if (pred.contains(f) && iou(pred.box_at(f), gt.track.box_at(f)) >= 0.5) ++hits;
            d.recovery = 100.0 * static_cast<double>(hits) / static_cast<double>(gt.track.length());
            temporal.push_back({pred.score, d.tiou >= 0.25, gt.pair_id});
            spatial.push_back({pred.score, d.stiou >= 0.25, gt.pair_id});
        }
        recovery += d.recovery;
        if (d.stiou > 0.05) success += 1;
        report.pairs.push_back(d);
    }
    const auto n = static_cast<std::int64_t>(gts.size());
    report.tap25 = average_precision(temporal, n);
    report.stap25 = average_precision(spatial, n);
    if (n > 0) {
        report.recovery = recovery / static_cast<double>(n);
        report.success = 100.0 * success / static_cast<double>(n);
    }
    return report;
}

std::string prediction_to_json(const Prediction& p) {
    json doc = {{"pair_id", p.pair_id}};
    if (p.track) {
        json boxes = json::array();
        for (const auto& b : p.track->boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        doc["start"] = p.track->start;
        doc["end"] = p.track->end;
        doc["boxes"] = boxes;
        doc["peak_score"] = p.track->score;
    } else {
        doc["start"] = nullptr;
        doc["end"] = nullptr;
        doc["boxes"] = json::array();
        doc["peak_score"] = 0.0;
    }
    return doc.dump();
}

Prediction prediction_from_json(const std::string& line) {
    json doc;
    try {
        doc = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("prediction: ") + e.what());
    }
    if (!doc.is_object() || doc.size() != 5) throw ParseError("prediction: expected {pair_id, start, end, boxes, peak_score}");
    for (const char* key : {"pair_id", "start", "end", "boxes", "peak_score"})
        if (!doc.contains(key)) throw ParseError(std::string("prediction: missing field '") + key + "'");
    if (!doc["pair_id"].is_string()) throw ParseError("prediction: 'pair_id' must be a string");
    if (!doc["boxes"].is_array()) throw ParseError("prediction: 'boxes' must be an array");
    if (!doc["peak_score"].is_number()) throw ParseError("prediction: 'peak_score' must be a number");
    Prediction p{doc["pair_id"].get<std::string>(), std::nullopt};
    if (doc["start"].is_null() && doc["end"].is_null()) {
        if (!doc["boxes"].empty()) throw ParseError("prediction: boxes given without an interval");
        return p;
    }
    if (!doc["start"].is_number_integer() || !doc["end"].is_number_integer())
        throw ParseError("prediction: 'start' and 'end' must be integers or both null");
    ResponseTrack t{doc["start"].get<std::int64_t>(), doc["end"].get<std::int64_t>(), {}, doc["peak_score"].get<double>()};
    if (t.start < 0 || t.end < t.start) throw ParseError("prediction: invalid interval");
    if (static_cast<std::int64_t>(doc["boxes"].size()) != t.length())
        throw ParseError("prediction: need one box per frame of the interval");
    for (const auto& b : doc["boxes"]) {
        if (!b.is_array() || b.size() != 4) throw ParseError("prediction: boxes must be [x1, y1, x2, y2]");
        for (const auto& v : b)
            if (!v.is_number()) throw ParseError("prediction: box coordinates must be numbers");
        t.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
    }
    p.track = std::move(t);
    return p;
}

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& p : predictions) out << prediction_to_json(p) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Prediction> out;
    std::string line;
    std::int64_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            out.push_back(prediction_from_json(line));
        } catch (const ParseError& e) {
            throw ParseError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

std::string report_to_json(const EvalReport& r) {
    json pairs = json::array();
    for (const auto& d : r.pairs)
        pairs.push_back({{"pair_id", d.pair_id},
                         {"predicted", d.predicted},
                         {"tiou", d.tiou},
                         {"stiou", d.stiou},
                         {"recovery", d.recovery},
                         {"score", d.score}});
    json doc = {{"tAP25", r.tap25}, {"stAP25", r.stap25}, {"recovery", r.recovery}, {"success", r.success}, {"pairs", pairs}};
    return doc.dump(2);
}

FrameScores score_frames(const PrvqlModel& model, const QueryVideoPair& pair) {
    NoGradGuard no_grad;
    std::vector<std::int64_t> all(static_cast<std::size_t>(pair.length()));
    for (std::int64_t i = 0; i < pair.length(); ++i) all[static_cast<std::size_t>(i)] = i;
    const auto result = model.forward(image_to_tensor(pair.query), frames_to_tensor(pair.frames, all));
    FrameScores out;
    for (const auto& b : per_frame_best(result.final_heads().scores, result.final_heads().boxes)) {
        out.scores.push_back(b.score);
        out.boxes.push_back(b.box);
    }
    return out;
}

Prediction predict_pair(const PrvqlModel& model, const QueryVideoPair& pair, const InferenceConfig& config) {
    const auto fs = score_frames(model, pair);
    return {pair.pair_id, infer_track(fs.scores, fs.boxes, config)};
}

std::vector<GroundTruthTrack> ground_truth_tracks(const std::vector<QueryVideoPair>& pairs) {
    std::vector<GroundTruthTrack> out;
    for (const auto& p : pairs) out.push_back({p.pair_id, extract_response_track(p.gt)});
    return out;
}

}  // namespace prvql
