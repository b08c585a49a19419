#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "prvql/geometry.hpp"

namespace prvql {

// Contiguous inclusive frame interval with one box per frame.
struct ResponseTrack {
    std::int64_t start = 0, end = 0;
    std::vector<Box> boxes;
    double score = 0;

    std::int64_t length() const { return end - start + 1; }
    bool contains(std::int64_t frame) const { return frame >= start && frame <= end; }
    const Box& box_at(std::int64_t frame) const { return boxes[static_cast<std::size_t>(frame - start)]; }
    bool operator==(const ResponseTrack&) const = default;
};

struct GroundTruth {
    std::vector<std::optional<Box>> boxes;  // one per frame; empty where the target does not occur

    std::int64_t frames() const { return static_cast<std::int64_t>(boxes.size()); }
    bool occurs(std::int64_t frame) const { return boxes[static_cast<std::size_t>(frame)].has_value(); }
    std::vector<bool> occurrence() const;
    bool operator==(const GroundTruth&) const = default;
};

// The last maximal run of occurring frames. Throws ContractError if the
// target never occurs.
ResponseTrack extract_response_track(const GroundTruth& gt);

}  // namespace prvql
