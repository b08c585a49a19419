#include <Eigen/Core>
#include <cmath>
#include <limits>

#include "ops_internal.hpp"

namespace prvql::ops {

using detail::alloc;

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

// C (m x n) (+)= op(A) * op(B), all row-major.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n, bool trans_a, bool trans_b,
          bool accumulate) {
    MapM<T> C(c, m, n);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b)
        C.noalias() += MapC<T>(a, m, k) * MapC<T>(b, k, n);
    else if (!trans_a && trans_b)
        C.noalias() += MapC<T>(a, m, k) * MapC<T>(b, n, k).transpose();
    else if (trans_a && !trans_b)
        C.noalias() += MapC<T>(a, k, m).transpose() * MapC<T>(b, k, n);
    else
        C.noalias() += MapC<T>(a, k, m).transpose() * MapC<T>(b, n, k).transpose();
}

enum class MatmulMode { kSharedRhs, kBatched, kSharedLhs };

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_same_dtype(a, b, "matmul");
    if (a.dim() < 2 || b.dim() < 2)
        throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const auto m = a.shape()[a.dim() - 2], k = a.shape()[a.dim() - 1];
    const auto kb = b.shape()[b.dim() - 2], n = b.shape()[b.dim() - 1];
    if (k != kb)
        throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    MatmulMode mode;
    std::int64_t batch = 1;
    Shape out_shape;
    if (b.dim() == 2) {
        mode = MatmulMode::kSharedRhs;
        out_shape = Shape(a.shape().begin(), a.shape().end() - 1);
        out_shape.push_back(n);
    } else if (a.dim() == 2) {
        mode = MatmulMode::kSharedLhs;
        out_shape = Shape(b.shape().begin(), b.shape().end() - 2);
        batch = shape_numel(out_shape);
        out_shape.push_back(m);
        out_shape.push_back(n);
    } else {
        if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2))
            throw DimensionError("matmul: batch dimensions differ for " + shape_str(a.shape()) + " and " +
                                 shape_str(b.shape()));
        mode = MatmulMode::kBatched;
        out_shape = Shape(a.shape().begin(), a.shape().end() - 2);
        batch = shape_numel(out_shape);
        out_shape.push_back(m);
        out_shape.push_back(n);
    }
    const std::int64_t rows = mode == MatmulMode::kSharedRhs ? a.numel() / k : m;

    auto out = alloc(a.dtype(), shape_numel(out_shape));
    visit_dtype(a.dtype(), [&]<typename T>() {
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* pc = out->as<T>();
        if (mode == MatmulMode::kSharedRhs) {
            gemm(pa, pb, pc, rows, k, n, false, false, false);
            return;
        }
        for (std::int64_t i = 0; i < batch; ++i) {
            const T* ai = mode == MatmulMode::kSharedLhs ? pa : pa + i * m * k;
            gemm(ai, pb + i * k * n, pc + i * m * n, m, k, n, false, false, false);
        }
    });

    return make_result(out_shape, out, "matmul", {a, b}, [a, b, mode, batch, rows, m, k, n](const Tensor& g) {
        std::vector<Tensor> grads(2);
        visit_dtype(a.dtype(), [&]<typename T>() {
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            const T* pg = g.data<T>();
            if (a.requires_grad()) {
                auto ga = alloc(a.dtype(), a.numel());
                T* p = ga->as<T>();
                if (mode == MatmulMode::kSharedRhs) {
                    gemm(pg, pb, p, rows, n, k, false, true, false);
                } else {
                    for (std::int64_t i = 0; i < batch; ++i) {
                        T* dst = mode == MatmulMode::kSharedLhs ? p : p + i * m * k;
                        gemm(pg + i * m * n, pb + i * k * n, dst, m, n, k, false, true,
                             mode == MatmulMode::kSharedLhs);
                    }
                }
                grads[0] = Tensor::from_storage(a.shape(), ga);
            }
            if (b.requires_grad()) {
                auto gb = alloc(b.dtype(), b.numel());
                T* p = gb->as<T>();
                if (mode == MatmulMode::kSharedRhs) {
                    gemm(pa, pg, p, k, rows, n, true, false, false);
                } else {
                    for (std::int64_t i = 0; i < batch; ++i) {
                        const T* ai = mode == MatmulMode::kSharedLhs ? pa : pa + i * m * k;
                        gemm(ai, pg + i * m * n, p + i * k * n, k, m, n, true, false, false);
                    }
                }
                grads[1] = Tensor::from_storage(b.shape(), gb);
            }
        });
        return grads;
    });
}

Tensor softmax(const Tensor& x, std::int64_t axis_in) {
    const auto axis = detail::normalize_axis(axis_in, x.dim(), "softmax");
    const auto sp = detail::split_at(x.shape(), axis);
    auto ys = alloc(x.dtype(), x.numel());
    constexpr double kMaskedBelow = kMaskedLogit / 2;
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* py = ys->as<T>();
        std::vector<double> e(static_cast<std::size_t>(sp.n));
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const T* row = px + o * sp.n * sp.inner + i;
                T* dst = py + o * sp.n * sp.inner + i;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, static_cast<double>(row[j * sp.inner]));
                if (!(mx > kMaskedBelow)) throw ContractError("softmax: fully masked row");
                double total = 0.0;
                for (std::int64_t j = 0; j < sp.n; ++j) {
                    const double v = static_cast<double>(row[j * sp.inner]);
                    e[j] = v <= kMaskedBelow ? 0.0 : std::exp(v - mx);
                    total += e[j];
                }
                for (std::int64_t j = 0; j < sp.n; ++j) dst[j * sp.inner] = static_cast<T>(e[j] / total);
            }
    });
    return make_result(x.shape(), ys, "softmax", {x}, [x, ys, sp](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* py = ys->as<T>();
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const auto base = o * sp.n * sp.inner + i;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < sp.n; ++j)
                        dot += static_cast<double>(pg[base + j * sp.inner]) * py[base + j * sp.inner];
                    for (std::int64_t j = 0; j < sp.n; ++j) {
                        const auto p = base + j * sp.inner;
                        po[p] = static_cast<T>(py[p] * (pg[p] - dot));
                    }
                }
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    detail::require_same_dtype(x, gamma, "layer_norm");
    detail::require_same_dtype(x, beta, "layer_norm");
    const auto c = x.shape().back();
    if (gamma.numel() != c || beta.numel() != c)
        throw DimensionError("layer_norm: affine parameters must have " + std::to_string(c) + " entries");
    const auto rows = x.numel() / c;
    auto ys = alloc(x.dtype(), x.numel());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        const T* pgam = gamma.data<T>();
        const T* pbet = beta.data<T>();
        T* py = ys->as<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = px + r * c;
            double mu = 0.0;
            for (std::int64_t j = 0; j < c; ++j) mu += row[j];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = inv;
            for (std::int64_t j = 0; j < c; ++j) {
                const double h = (row[j] - mu) * inv;
                (*xhat)[r * c + j] = h;
                py[r * c + j] = static_cast<T>(h * pgam[j] + pbet[j]);
            }
        }
    });
    return make_result(
        x.shape(), ys, "layer_norm", {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, rows, c](const Tensor& g) {
            std::vector<Tensor> grads(3);
            visit_dtype(x.dtype(), [&]<typename T>() {
                const T* pg = g.data<T>();
                const T* pgam = gamma.data<T>();
                std::vector<double> dgam(static_cast<std::size_t>(c), 0.0), dbet(static_cast<std::size_t>(c), 0.0);
                auto gx = alloc(x.dtype(), x.numel());
                T* px = gx->as<T>();
                std::vector<double> gh(static_cast<std::size_t>(c));
                for (std::int64_t r = 0; r < rows; ++r) {
                    double sum_gh = 0.0, sum_ghx = 0.0;
                    for (std::int64_t j = 0; j < c; ++j) {
                        const double gv = pg[r * c + j];
                        const double h = (*xhat)[r * c + j];
                        dgam[j] += gv * h;
                        dbet[j] += gv;
                        gh[j] = gv * pgam[j];
                        sum_gh += gh[j];
                        sum_ghx += gh[j] * h;
                    }
                    const double inv = (*inv_std)[r];
                    for (std::int64_t j = 0; j < c; ++j) {
                        const double h = (*xhat)[r * c + j];
                        px[r * c + j] = static_cast<T>(inv / static_cast<double>(c) *
                                                       (static_cast<double>(c) * gh[j] - sum_gh - h * sum_ghx));
                    }
                }
                if (x.requires_grad()) grads[0] = Tensor::from_storage(x.shape(), gx);
                if (gamma.requires_grad()) grads[1] = Tensor::from_values(gamma.shape(), dgam, x.dtype());
                if (beta.requires_grad()) grads[2] = Tensor::from_values(beta.shape(), dbet, x.dtype());
            });
            return grads;
        });
}

Tensor im2col(const Tensor& x, std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t padding) {
    if (x.dim() != 4) throw DimensionError("im2col expects [N,H,W,C], got " + shape_str(x.shape()));
    const auto N = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (stride < 1 || padding < 0) throw ConfigError("im2col: stride must be >= 1 and padding >= 0");
    const auto Ho = (H + 2 * padding - kh) / stride + 1;
    const auto Wo = (W + 2 * padding - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("im2col: kernel larger than padded input");
    const auto K = kh * kw * C;
    const Shape out_shape{N, Ho, Wo, K};

    // Shared traversal: calls fn(col_offset, x_offset) for each in-bounds tap.
    auto traverse = [=](auto&& fn) {
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t oy = 0; oy < Ho; ++oy)
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                    const auto col_base = ((n * Ho + oy) * Wo + ox) * K;
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const auto iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= H) continue;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const auto ix = ox * stride + kx - padding;
                            if (ix < 0 || ix >= W) continue;
                            fn(col_base + (ky * kw + kx) * C, ((n * H + iy) * W + ix) * C, C);
                        }
                    }
                }
    };

    auto out = alloc(x.dtype(), shape_numel(out_shape));
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        traverse([&](std::int64_t co, std::int64_t xo, std::int64_t len) { std::copy_n(px + xo, len, po + co); });
    });
    return make_result(out_shape, out, "im2col", {x}, [x, traverse](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            traverse([&](std::int64_t co, std::int64_t xo, std::int64_t len) {
                for (std::int64_t i = 0; i < len; ++i) po[xo + i] += pg[co + i];
            });
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding) {
    if (x.dim() != 4) throw DimensionError("conv2d expects input [N,H,W,C], got " + shape_str(x.shape()));
    if (weight.dim() != 4)
        throw DimensionError("conv2d expects weight [kh,kw,Cin,Cout], got " + shape_str(weight.shape()));
    const auto kh = weight.shape()[0], kw = weight.shape()[1], cin = weight.shape()[2], cout = weight.shape()[3];
    if (x.shape()[3] != cin)
        throw DimensionError("conv2d: input channels " + std::to_string(x.shape()[3]) + " do not match kernel " +
                             shape_str(weight.shape()));
    Tensor y;
    if (kh == 1 && kw == 1 && stride == 1 && padding == 0) {
        y = matmul(x, reshape(weight, {cin, cout}));
    } else {
        y = matmul(im2col(x, kh, kw, stride, padding), reshape(weight, {kh * kw * cin, cout}));
    }
    if (bias.defined()) {
        if (bias.numel() != cout) throw DimensionError("conv2d: bias must have Cout entries");
        y = add(y, bias);
    }
    return y;
}

}  // namespace prvql::ops
