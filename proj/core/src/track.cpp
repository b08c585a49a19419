#include "prvql/track.hpp"

namespace prvql {

std::vector<bool> GroundTruth::occurrence() const {
    std::vector<bool> out;
    for (const auto& b : boxes) out.push_back(b.has_value());
    return out;
}

ResponseTrack extract_response_track(const GroundTruth& gt) {
    std::int64_t end = gt.frames() - 1;
    while (end >= 0 && !gt.occurs(end)) --end;
    if (end < 0) throw ContractError("response track: the target never occurs");
    std::int64_t start = end;
    while (start > 0 && gt.occurs(start - 1)) --start;
    ResponseTrack track{start, end, {}, 1.0};
    for (std::int64_t i = start; i <= end; ++i) track.boxes.push_back(*gt.boxes[static_cast<std::size_t>(i)]);
    return track;
}

}  // namespace prvql
