#pragma once

#include <array>
#include <vector>

#include "prvql/core/tensor.hpp"

namespace prvql {

// Pixel box (x1, y1, x2, y2), origin top-left.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
    Box clamped(double side) const;
    std::array<double, 4> as_array() const { return {x1, y1, x2, y2}; }
    bool operator==(const Box&) const = default;
};

double intersection_area(const Box& a, const Box& b);
// Zero-area boxes count as points: IoU 1 if coincident, else 0.
double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

struct AnchorSpec {
    // Square anchor sides as fractions of the frame side.
    std::vector<double> scales{16.0 / 480.0, 32.0 / 480.0, 64.0 / 480.0, 48.0 / 480.0};
    std::vector<double> ratios{0.5, 1.0, 2.0};

    std::int64_t per_cell() const { return static_cast<std::int64_t>(scales.size() * ratios.size()); }
};

// Anchors for a grid x grid layout on a frame of `frame_side` pixels, indexed
// ((y * grid_w + x) * m + scale * R + ratio). Ratio r means h / w = r.
std::vector<Box> make_anchors(const AnchorSpec& spec, std::int64_t grid_h, std::int64_t grid_w, double frame_side);
Tensor anchors_tensor(const std::vector<Box>& anchors, DType dtype = default_dtype());

}  // namespace prvql
