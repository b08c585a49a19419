#include <algorithm>
#include <cmath>

#include "ops_internal.hpp"

namespace prvql::ops {

using detail::alloc;

namespace {

// Interpolation taps for one resized axis.
struct Taps {
    std::vector<std::int64_t> lo, hi;
    std::vector<double> frac;
};

Taps resize_taps(std::int64_t in, std::int64_t out) {
    Taps t;
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::int64_t>(std::floor(src));
        t.lo.push_back(lo);
        t.hi.push_back(std::min(lo + 1, in - 1));
        t.frac.push_back(src - static_cast<double>(lo));
    }
    return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    if (x.dim() != 4) throw DimensionError("bilinear_resize expects [N,h,w,C], got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: target size must be >= 1");
    const auto N = x.shape()[0], h = x.shape()[1], w = x.shape()[2], C = x.shape()[3];
    const Shape out_shape{N, out_h, out_w, C};
    auto ty = std::make_shared<Taps>(resize_taps(h, out_h));
    auto tx = std::make_shared<Taps>(resize_taps(w, out_w));

    auto out = alloc(x.dtype(), shape_numel(out_shape));
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t oy = 0; oy < out_h; ++oy) {
                const double fy = ty->frac[oy];
                const T* r0 = px + (n * h + ty->lo[oy]) * w * C;
                const T* r1 = px + (n * h + ty->hi[oy]) * w * C;
                for (std::int64_t ox = 0; ox < out_w; ++ox) {
                    const double fx = tx->frac[ox];
                    const auto x0 = tx->lo[ox] * C, x1 = tx->hi[ox] * C;
                    T* dst = po + ((n * out_h + oy) * out_w + ox) * C;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double top = (1 - fx) * r0[x0 + c] + fx * r0[x1 + c];
                        const double bot = (1 - fx) * r1[x0 + c] + fx * r1[x1 + c];
                        dst[c] = static_cast<T>((1 - fy) * top + fy * bot);
                    }
                }
            }
    });
    return make_result(out_shape, out, "bilinear_resize", {x}, [x, ty, tx, out_h, out_w](const Tensor& g) {
        const auto N = x.shape()[0], h = x.shape()[1], w = x.shape()[2], C = x.shape()[3];
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t oy = 0; oy < out_h; ++oy) {
                    const double fy = ty->frac[oy];
                    T* r0 = po + (n * h + ty->lo[oy]) * w * C;
                    T* r1 = po + (n * h + ty->hi[oy]) * w * C;
                    for (std::int64_t ox = 0; ox < out_w; ++ox) {
                        const double fx = tx->frac[ox];
                        const auto x0 = tx->lo[ox] * C, x1 = tx->hi[ox] * C;
                        const T* src = pg + ((n * out_h + oy) * out_w + ox) * C;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const double v = src[c];
                            r0[x0 + c] += static_cast<T>((1 - fy) * (1 - fx) * v);
                            r0[x1 + c] += static_cast<T>((1 - fy) * fx * v);
                            r1[x0 + c] += static_cast<T>(fy * (1 - fx) * v);
                            r1[x1 + c] += static_cast<T>(fy * fx * v);
                        }
                    }
                }
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

namespace {

// One bilinear sample position on the feature grid together with the
// derivative of the sampling coordinate with respect to the box corners.
struct Sample {
    std::int64_t y0, y1, x0, x1;
    double ly, lx;
    bool clamped_y, clamped_x;
    double dy_dy1, dy_dy2, dx_dx1, dx_dx2;
};

Sample make_sample(double y1, double y2, double x1, double x2, double ty, double tx, double scale, std::int64_t H,
                   std::int64_t W) {
    Sample s{};
    double fy = scale * ((1 - ty) * y1 + ty * y2) - 0.5;
    double fx = scale * ((1 - tx) * x1 + tx * x2) - 0.5;
    s.clamped_y = fy < 0.0 || fy > static_cast<double>(H - 1);
    s.clamped_x = fx < 0.0 || fx > static_cast<double>(W - 1);
    fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
    s.y0 = static_cast<std::int64_t>(std::floor(fy));
    s.x0 = static_cast<std::int64_t>(std::floor(fx));
    s.y1 = std::min(s.y0 + 1, H - 1);
    s.x1 = std::min(s.x0 + 1, W - 1);
    s.ly = fy - static_cast<double>(s.y0);
    s.lx = fx - static_cast<double>(s.x0);
    s.dy_dy1 = scale * (1 - ty);
    s.dy_dy2 = scale * ty;
    s.dx_dx1 = scale * (1 - tx);
    s.dx_dx2 = scale * tx;
    return s;
}

}  // namespace

Tensor roi_align(const Tensor& feature, const Tensor& box, std::int64_t pooled, double spatial_scale,
                 std::int64_t sampling_ratio) {
    detail::require_same_dtype(feature, box, "roi_align");
    if (feature.dim() != 3) throw DimensionError("roi_align expects feature [H,W,C], got " + shape_str(feature.shape()));
    if (box.numel() != 4) throw DimensionError("roi_align expects a 4-element box");
    if (pooled < 1 || sampling_ratio < 1) throw ConfigError("roi_align: pooled size and sampling ratio must be >= 1");
    const auto H = feature.shape()[0], W = feature.shape()[1], C = feature.shape()[2];
    const auto b = box.to_vector();
    const auto P = pooled, sr = sampling_ratio;

    // Sample table shared between forward and backward.
    auto samples = std::make_shared<std::vector<Sample>>();
    samples->reserve(static_cast<std::size_t>(P * P * sr * sr));
    for (std::int64_t py = 0; py < P; ++py)
        for (std::int64_t px = 0; px < P; ++px)
            for (std::int64_t iy = 0; iy < sr; ++iy)
                for (std::int64_t ix = 0; ix < sr; ++ix) {
                    const double ty = (static_cast<double>(py) + (iy + 0.5) / static_cast<double>(sr)) / P;
                    const double tx = (static_cast<double>(px) + (ix + 0.5) / static_cast<double>(sr)) / P;
                    samples->push_back(make_sample(b[1], b[3], b[0], b[2], ty, tx, spatial_scale, H, W));
                }
    const double inv_count = 1.0 / static_cast<double>(sr * sr);
    const Shape out_shape{P, P, C};

    auto out = alloc(feature.dtype(), P * P * C);
    visit_dtype(feature.dtype(), [&]<typename T>() {
        const T* pf = feature.data<T>();
        T* po = out->as<T>();
        for (std::int64_t bin = 0; bin < P * P; ++bin) {
            T* dst = po + bin * C;
            for (std::int64_t k = 0; k < sr * sr; ++k) {
                const Sample& s = (*samples)[bin * sr * sr + k];
                const T* v00 = pf + (s.y0 * W + s.x0) * C;
                const T* v01 = pf + (s.y0 * W + s.x1) * C;
                const T* v10 = pf + (s.y1 * W + s.x0) * C;
                const T* v11 = pf + (s.y1 * W + s.x1) * C;
                const double w00 = (1 - s.ly) * (1 - s.lx), w01 = (1 - s.ly) * s.lx;
                const double w10 = s.ly * (1 - s.lx), w11 = s.ly * s.lx;
                for (std::int64_t c = 0; c < C; ++c)
                    dst[c] += static_cast<T>(inv_count * (w00 * v00[c] + w01 * v01[c] + w10 * v10[c] + w11 * v11[c]));
            }
        }
    });

    return make_result(out_shape, out, "roi_align", {feature, box}, [feature, box, samples, P, sr, inv_count](const Tensor& g) {
        const auto H = feature.shape()[0], W = feature.shape()[1], C = feature.shape()[2];
        (void)H;
        std::vector<Tensor> grads(2);
        visit_dtype(feature.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            const T* pf = feature.data<T>();
            auto gf = alloc(feature.dtype(), feature.numel());
            T* pgf = gf->as<T>();
            double gbox[4] = {0, 0, 0, 0};
            for (std::int64_t bin = 0; bin < P * P; ++bin) {
                const T* gb = pg + bin * C;
                for (std::int64_t k = 0; k < sr * sr; ++k) {
                    const Sample& s = (*samples)[bin * sr * sr + k];
                    const auto o00 = (s.y0 * W + s.x0) * C, o01 = (s.y0 * W + s.x1) * C;
                    const auto o10 = (s.y1 * W + s.x0) * C, o11 = (s.y1 * W + s.x1) * C;
                    const double w00 = (1 - s.ly) * (1 - s.lx), w01 = (1 - s.ly) * s.lx;
                    const double w10 = s.ly * (1 - s.lx), w11 = s.ly * s.lx;
                    double d_fy = 0.0, d_fx = 0.0;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double gv = inv_count * gb[c];
                        pgf[o00 + c] += static_cast<T>(w00 * gv);
                        pgf[o01 + c] += static_cast<T>(w01 * gv);
                        pgf[o10 + c] += static_cast<T>(w10 * gv);
                        pgf[o11 + c] += static_cast<T>(w11 * gv);
                        // y1 == y0 at the bottom edge makes the finite difference vanish.
                        d_fy += gv * ((1 - s.lx) * (pf[o10 + c] - pf[o00 + c]) + s.lx * (pf[o11 + c] - pf[o01 + c]));
                        d_fx += gv * ((1 - s.ly) * (pf[o01 + c] - pf[o00 + c]) + s.ly * (pf[o11 + c] - pf[o10 + c]));
                    }
                    if (s.y1 == s.y0 || s.clamped_y) d_fy = 0.0;
                    if (s.x1 == s.x0 || s.clamped_x) d_fx = 0.0;
                    gbox[0] += d_fx * s.dx_dx1;
                    gbox[2] += d_fx * s.dx_dx2;
                    gbox[1] += d_fy * s.dy_dy1;
                    gbox[3] += d_fy * s.dy_dy2;
                }
            }
            if (feature.requires_grad()) grads[0] = Tensor::from_storage(feature.shape(), gf);
            if (box.requires_grad())
                grads[1] = Tensor::from_values(box.shape(), std::span<const double>(gbox, 4), box.dtype());
        });
        return grads;
    });
}

Tensor minmax_normalize(const Tensor& x) {
    if (x.dim() < 1) throw DimensionError("minmax_normalize needs rank >= 1");
    const auto n = x.shape().back();
    const auto rows = x.numel() / n;
    auto ys = alloc(x.dtype(), x.numel());
    struct RowStat {
        std::int64_t amin, amax;
        double range;
    };
    auto stats = std::make_shared<std::vector<RowStat>>(static_cast<std::size_t>(rows));
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* py = ys->as<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = px + r * n;
            std::int64_t amin = 0, amax = 0;
            for (std::int64_t j = 1; j < n; ++j) {
                if (row[j] < row[amin]) amin = j;
                if (row[j] > row[amax]) amax = j;
            }
            const double lo = row[amin];
            const double range = static_cast<double>(row[amax]) - lo;
            (*stats)[r] = {amin, amax, range};
            for (std::int64_t j = 0; j < n; ++j)
                py[r * n + j] = range > 0.0 ? static_cast<T>((row[j] - lo) / range) : static_cast<T>(0.5);
        }
    });
    return make_result(x.shape(), ys, "minmax_normalize", {x}, [x, ys, stats, n, rows](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            const T* py = ys->as<T>();
            T* po = gx->as<T>();
            for (std::int64_t r = 0; r < rows; ++r) {
                const auto& st = (*stats)[r];
                if (!(st.range > 0.0)) continue;
                double sum_g = 0.0, sum_gy = 0.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    sum_g += pg[r * n + j];
                    sum_gy += static_cast<double>(pg[r * n + j]) * py[r * n + j];
                }
                for (std::int64_t j = 0; j < n; ++j) po[r * n + j] = static_cast<T>(pg[r * n + j] / st.range);
                po[r * n + st.amin] += static_cast<T>((sum_gy - sum_g) / st.range);
                po[r * n + st.amax] -= static_cast<T>(sum_gy / st.range);
            }
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

Tensor binary_cross_entropy(const Tensor& probs, const Tensor& targets, double eps) {
    detail::require_same_dtype(probs, targets, "binary_cross_entropy");
    if (probs.shape() != targets.shape())
        throw DimensionError("binary_cross_entropy: " + shape_str(probs.shape()) + " vs " +
                             shape_str(targets.shape()));
    auto out = alloc(probs.dtype(), probs.numel());
    visit_dtype(probs.dtype(), [&]<typename T>() {
        const T* p = probs.data<T>();
        const T* t = targets.data<T>();
        T* o = out->as<T>();
        for (std::int64_t i = 0; i < probs.numel(); ++i) {
            const double q = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
            o[i] = static_cast<T>(-(t[i] * std::log(q) + (1.0 - t[i]) * std::log(1.0 - q)));
        }
    });
    return make_result(probs.shape(), out, "binary_cross_entropy", {probs, targets},
                       [probs, targets, eps](const Tensor& g) {
                           std::vector<Tensor> grads(2);
                           auto gp = alloc(probs.dtype(), probs.numel());
                           visit_dtype(probs.dtype(), [&]<typename T>() {
                               const T* p = probs.data<T>();
                               const T* t = targets.data<T>();
                               const T* pg = g.data<T>();
                               T* o = gp->as<T>();
                               for (std::int64_t i = 0; i < probs.numel(); ++i) {
                                   const double q = p[i];
                                   if (q < eps || q > 1.0 - eps) continue;
                                   o[i] = static_cast<T>(pg[i] * (-t[i] / q + (1.0 - t[i]) / (1.0 - q)));
                               }
                           });
                           grads[0] = Tensor::from_storage(probs.shape(), gp);
                           return grads;
                       });
}

}  // namespace prvql::ops
