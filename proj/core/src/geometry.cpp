#include "prvql/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace prvql {

Box Box::clamped(double side) const {
    return {std::clamp(x1, 0.0, side), std::clamp(y1, 0.0, side), std::clamp(x2, 0.0, side),
            std::clamp(y2, 0.0, side)};
}

double intersection_area(const Box& a, const Box& b) {
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    return w > 0 && h > 0 ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) {
    const double uni = a.area() + b.area() - intersection_area(a, b);
    if (uni <= 0.0) return a == b ? 1.0 : 0.0;
    return intersection_area(a, b) / uni;
}

double giou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double value = uni > 0.0 ? inter / uni : (a == b ? 1.0 : 0.0);
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enclose = ew * eh;
    if (enclose <= 0.0) return value;
    return value - (enclose - uni) / enclose;
}

std::vector<Box> make_anchors(const AnchorSpec& spec, std::int64_t grid_h, std::int64_t grid_w, double frame_side) {
    if (spec.scales.empty() || spec.ratios.empty()) throw ConfigError("anchor spec needs scales and ratios");
    for (double s : spec.scales)
        if (!(s > 0)) throw ConfigError("anchor scales must be positive");
    for (double r : spec.ratios)
        if (!(r > 0)) throw ConfigError("anchor ratios must be positive");
    std::vector<Box> out;
    out.reserve(static_cast<std::size_t>(grid_h * grid_w * spec.per_cell()));
    const double cell_h = frame_side / static_cast<double>(grid_h);
    const double cell_w = frame_side / static_cast<double>(grid_w);
    for (std::int64_t y = 0; y < grid_h; ++y)
        for (std::int64_t x = 0; x < grid_w; ++x) {
            const double cx = (static_cast<double>(x) + 0.5) * cell_w;
            const double cy = (static_cast<double>(y) + 0.5) * cell_h;
            for (double s : spec.scales)
                for (double r : spec.ratios) {
                    const double side = s * frame_side;
                    const double w = side / std::sqrt(r), h = side * std::sqrt(r);
                    out.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
                }
        }
    return out;
}

Tensor anchors_tensor(const std::vector<Box>& anchors, DType dtype) {
    std::vector<double> flat;
    flat.reserve(anchors.size() * 4);
    for (const auto& b : anchors) flat.insert(flat.end(), {b.x1, b.y1, b.x2, b.y2});
    return Tensor::from_values({static_cast<std::int64_t>(anchors.size()), 4}, flat, dtype);
}

}  // namespace prvql
