#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prvql/inference.hpp"

// Brute-force evaluation reference: boxes live on an integer pixel lattice so
// every area is a pixel count, and AP is computed from explicit ranks.
namespace prvql::oracle {

constexpr std::int64_t kLattice = 24;
constexpr std::int64_t kFrames = 12;

inline Box random_box(Rng& rng) {
    const auto x = rng.uniform_int(0, 14), y = rng.uniform_int(0, 14);
    return {double(x), double(y), double(x + rng.uniform_int(1, 6)), double(y + rng.uniform_int(1, 6))};
}

inline ResponseTrack random_track(Rng& rng) {
    ResponseTrack t;
    t.start = rng.uniform_int(0, kFrames - 1);
    t.end = rng.uniform_int(t.start, kFrames - 1);
    for (auto f = t.start; f <= t.end; ++f) t.boxes.push_back(random_box(rng));
    t.score = std::round(rng.uniform() * 20) / 20;
    return t;
}

struct PixelCounts {
    std::int64_t inter = 0, uni = 0;
};

inline PixelCounts count_pixels(const Box* a, const Box* b) {
    auto covers = [](const Box* box, std::int64_t x, std::int64_t y) {
        return box && x >= box->x1 && x < box->x2 && y >= box->y1 && y < box->y2;
    };
    PixelCounts c;
    for (std::int64_t y = 0; y < kLattice; ++y)
        for (std::int64_t x = 0; x < kLattice; ++x) {
            const bool in_a = covers(a, x, y), in_b = covers(b, x, y);
            c.inter += in_a && in_b;
            c.uni += in_a || in_b;
        }
    return c;
}

inline double temporal_iou(const ResponseTrack& a, const ResponseTrack& b) {
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t f = 0; f < kFrames; ++f) {
        inter += a.contains(f) && b.contains(f);
        uni += a.contains(f) || b.contains(f);
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double tube_stiou(const ResponseTrack& a, const ResponseTrack& b) {
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t f = 0; f < kFrames; ++f) {
        const auto c = count_pixels(a.contains(f) ? &a.box_at(f) : nullptr, b.contains(f) ? &b.box_at(f) : nullptr);
        inter += c.inter;
        uni += c.uni;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double average_precision(const std::vector<Detection>& dets, std::int64_t num_gt) {
    if (num_gt <= 0) return 0.0;
    double sum = 0;
    for (const auto& d : dets) {
        if (!d.true_positive) continue;
        std::int64_t rank = 0, tp = 0;
        for (const auto& e : dets) {
            if (e.confidence > d.confidence || (e.confidence == d.confidence && e.pair_id <= d.pair_id)) {
                ++rank;
                tp += e.true_positive;
            }
        }
        sum += static_cast<double>(tp) / static_cast<double>(rank);
    }
    return sum / static_cast<double>(num_gt);
}

inline EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<GroundTruthTrack>& gts) {
    EvalReport r;
    std::vector<Detection> temporal, spatial;
    for (const auto& gt : gts) {
        const Prediction* match = nullptr;
        for (const auto& p : preds)
            if (p.pair_id == gt.pair_id) match = &p;
        if (!match || !match->track) continue;
        const auto& p = *match->track;
        std::int64_t hits = 0;
        for (std::int64_t f = 0; f < kFrames; ++f) {
            if (!p.contains(f) || !gt.track.contains(f)) continue;
            const auto c = count_pixels(&p.box_at(f), &gt.track.box_at(f));
            if (2 * c.inter >= c.uni) ++hits;
        }
        const double st = oracle::tube_stiou(p, gt.track);
        temporal.push_back({p.score, 4 * oracle::temporal_iou(p, gt.track) >= 1.0, gt.pair_id});
        spatial.push_back({p.score, 4 * st >= 1.0, gt.pair_id});
        r.recovery += 100.0 * static_cast<double>(hits) / static_cast<double>(gt.track.length());
        if (st > 0.05) r.success += 1;
    }
    const auto n = static_cast<std::int64_t>(gts.size());
    r.tap25 = oracle::average_precision(temporal, n);
    r.stap25 = oracle::average_precision(spatial, n);
    if (n > 0) {
        r.recovery /= static_cast<double>(n);
        r.success *= 100.0 / static_cast<double>(n);
    }
    return r;
}

struct Fixture {
    std::vector<Prediction> predictions;
    std::vector<GroundTruthTrack> gts;
};

// Mix of misses, empty predictions, near copies of the ground truth and
// unrelated tracks, plus one prediction for an unknown pair.
inline Fixture random_fixture(Rng& rng) {
    Fixture fx;
    const auto n = rng.uniform_int(1, 8);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::string id = "p" + std::to_string(i);
        const auto gt = random_track(rng);
        fx.gts.push_back({id, gt});
        const double r = rng.uniform();
        if (r < 0.15) continue;
        if (r < 0.25) {
            fx.predictions.push_back({id, std::nullopt});
            continue;
        }
        auto p = random_track(rng);
        if (r < 0.6) {
            p = gt;
            p.score = std::round(rng.uniform() * 20) / 20;
            for (auto& b : p.boxes) b.x2 += static_cast<double>(rng.uniform_int(0, 2));
        }
        fx.predictions.push_back({id, p});
    }
    fx.predictions.push_back({"unknown", random_track(rng)});
    return fx;
}

}  // namespace prvql::oracle
