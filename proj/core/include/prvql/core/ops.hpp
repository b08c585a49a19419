#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prvql/core/tensor.hpp"

// Differentiable tensor operations. Each records a backward rule on the tape
// when grad mode is enabled and an input requires a gradient.
namespace prvql::ops {

// Additive mask value used in place of -inf ahead of softmax.
inline constexpr double kMaskedLogit = -1e9;

// Elementwise binary ops follow numpy broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
// tanh-form GELU.
Tensor gelu(const Tensor& x);
// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim = false);
// Reductions routing the gradient to the first extreme element along the axis.
Tensor max(const Tensor& x, std::int64_t axis, bool keepdim = false);
Tensor min(const Tensor& x, std::int64_t axis, bool keepdim = false);
// Sums `g` down to `shape` along broadcast dimensions.
Tensor sum_to(const Tensor& g, const Shape& shape);

// Shares storage with the input; one dimension may be -1.
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x, std::int64_t start_axis = 0);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t begin, std::int64_t end);
Tensor concat(std::span<const Tensor> parts, std::int64_t axis);
Tensor stack(std::span<const Tensor> parts, std::int64_t axis = 0);
Tensor index_select(const Tensor& x, std::int64_t axis, std::span<const std::int64_t> indices);

// a: [..., m, k], b: [..., k, n]. Batch dims must be equal, or b may be 2-D
// (shared across the batch of a).
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable softmax; entries at the mask sentinel map to exactly 0.
// Throws ContractError("fully masked row") if every entry of a row is masked.
Tensor softmax(const Tensor& x, std::int64_t axis = -1);

// Normalizes over the last axis, then applies gamma/beta of shape [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Channels-last convolution. x: [N,H,W,Cin], weight: [kh,kw,Cin,Cout],
// bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding);
// Patch matrix for conv2d: [N,Ho,Wo,kh*kw*Cin], zero padded.
Tensor im2col(const Tensor& x, std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t padding);

// x: [N,h,w,C] -> [N,H,W,C], half-pixel centres, edge clamped.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// feature: [H,W,C]; box: [4] pixel (x1,y1,x2,y2). Pixel -> grid through
// `spatial_scale`. Each of P*P bins averages sampling_ratio^2 bilinear samples.
// Differentiable with respect to the feature map and the box coordinates.
Tensor roi_align(const Tensor& feature, const Tensor& box, std::int64_t pooled, double spatial_scale,
                 std::int64_t sampling_ratio = 2);

// Per-row (last axis) min-max scaling into [0,1]; constant rows become 0.5.
Tensor minmax_normalize(const Tensor& x);

// Elementwise -[t log p + (1-t) log(1-p)], p clamped to [eps, 1-eps].
Tensor binary_cross_entropy(const Tensor& probs, const Tensor& targets, double eps = 1e-7);

}  // namespace prvql::ops
