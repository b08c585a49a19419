#include <algorithm>
#include <cmath>
#include <numbers>

#include "ops_internal.hpp"

namespace prvql::ops {

using detail::alloc;

namespace {

struct Broadcast {
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b;
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` viewed in the broadcast output space (0 along broadcast dims).
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t step = 1;
    const std::size_t lead = out.size() - s.size();
    for (std::size_t i = s.size(); i-- > 0;) {
        if (s[i] != 1) strides[lead + i] = step;
        step *= s[i];
    }
    return strides;
}

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast p;
    p.out = broadcast_shape(a, b, op);
    p.stride_a = broadcast_strides(a, p.out);
    p.stride_b = broadcast_strides(b, p.out);
    return p;
}

// Calls fn(out_index, a_offset, b_offset) for every output element in order.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa, const std::vector<std::int64_t>& sb,
                        Fn&& fn) {
    const std::int64_t n = shape_numel(out);
    const std::size_t rank = out.size();
    if (rank == 0) {
        fn(0, 0, 0);
        return;
    }
    const std::int64_t inner = out[rank - 1];
    const std::int64_t ia_step = sa[rank - 1], ib_step = sb[rank - 1];
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t o = 0; o < n; o += inner) {
        for (std::int64_t j = 0; j < inner; ++j) fn(o + j, ia + j * ia_step, ib + j * ib_step);
        for (std::int64_t d = static_cast<std::int64_t>(rank) - 2; d >= 0; --d) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

template <class F>
Tensor binary_map(const Tensor& a, const Tensor& b, const Broadcast& p, F f) {
    auto out = alloc(a.dtype(), shape_numel(p.out));
    visit_dtype(a.dtype(), [&]<typename T>() {
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out->as<T>();
        for_each_broadcast(p.out, p.stride_a, p.stride_b,
                           [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = f(pa[i], pb[j]); });
    });
    return Tensor::from_storage(p.out, out);
}

// Gradient helper: g has the broadcast output shape; f(g, a, b) gives the
// local contribution, which is then reduced to `target`.
template <class F>
Tensor grad_map(const Tensor& g, const Tensor& a, const Tensor& b, const Broadcast& p, const Shape& target, F f) {
    auto full = alloc(g.dtype(), shape_numel(p.out));
    visit_dtype(g.dtype(), [&]<typename T>() {
        const T* pg = g.data<T>();
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = full->as<T>();
        for_each_broadcast(p.out, p.stride_a, p.stride_b,
                           [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = f(pg[o], pa[i], pb[j]); });
    });
    return sum_to(Tensor::from_storage(p.out, full), target);
}

template <class F, class GA, class GB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, GA ga, GB gb) {
    detail::require_same_dtype(a, b, name);
    auto plan = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape(), name));
    Tensor out = binary_map(a, b, *plan, f);
    return make_result(out.shape(), out.storage(), name, {a, b}, [a, b, plan, ga, gb](const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = grad_map(g, a, b, *plan, a.shape(), ga);
        if (b.requires_grad()) grads[1] = grad_map(g, a, b, *plan, b.shape(), gb);
        return grads;
    });
}

// Unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Tensor unary_op(const Tensor& x, const char* name, F f, D df) {
    auto ys = alloc(x.dtype(), x.numel());
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* py = ys->as<T>();
        for (std::int64_t i = 0; i < x.numel(); ++i) py[i] = static_cast<T>(f(static_cast<double>(px[i])));
    });
    return make_result(x.shape(), ys, name, {x}, [x, ys, df](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* px = x.data<T>();
            const T* py = ys->as<T>();
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t i = 0; i < x.numel(); ++i)
                po[i] = static_cast<T>(pg[i] * df(static_cast<double>(px[i]), static_cast<double>(py[i])));
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

}  // namespace

Tensor sum_to(const Tensor& g, const Shape& shape) {
    if (g.shape() == shape) return g;
    const Shape out = broadcast_shape(g.shape(), shape, "sum_to");
    if (out != g.shape())
        throw DimensionError("sum_to: " + shape_str(shape) + " does not broadcast to " + shape_str(g.shape()));
    auto dst = alloc(g.dtype(), shape_numel(shape));
    const auto sg = broadcast_strides(g.shape(), out);
    const auto st = broadcast_strides(shape, out);
    visit_dtype(g.dtype(), [&]<typename T>() {
        const T* pg = g.data<T>();
        T* pt = dst->as<T>();
        for_each_broadcast(out, sg, st, [&](std::int64_t, std::int64_t i, std::int64_t j) { pt[j] += pg[i]; });
    });
    return Tensor::from_storage(shape, dst);
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](auto x, auto y) { return x + y; }, [](auto g, auto, auto) { return g; },
        [](auto g, auto, auto) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](auto x, auto y) { return x - y; }, [](auto g, auto, auto) { return g; },
        [](auto g, auto, auto) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](auto x, auto y) { return x * y; }, [](auto g, auto, auto y) { return g * y; },
        [](auto g, auto x, auto) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](auto x, auto y) { return x / y; }, [](auto g, auto, auto y) { return g / y; },
        [](auto g, auto x, auto y) { return -g * x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "maximum", [](auto x, auto y) { return x >= y ? x : y; },
        [](auto g, auto x, auto y) { return x >= y ? g : decltype(g)(0); },
        [](auto g, auto x, auto y) { return x >= y ? decltype(g)(0) : g; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "minimum", [](auto x, auto y) { return x <= y ? x : y; },
        [](auto g, auto x, auto y) { return x <= y ? g : decltype(g)(0); },
        [](auto g, auto x, auto y) { return x <= y ? decltype(g)(0) : g; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(
        x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary_op(
        x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
    return unary_op(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        x, "abs", [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid",
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary_op(
        x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
        [](double v, double) {
            const double u = k * (v + c * v * v * v);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * c * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary_op(
        x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    auto out = alloc(x.dtype(), 1);
    visit_dtype(x.dtype(), [&]<typename T>() {
        double acc = 0.0;
        for (T v : x.values<T>()) acc += v;
        out->as<T>()[0] = static_cast<T>(acc);
    });
    return make_result({}, out, "sum", {x}, [x](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(x.shape(), g.item(), x.dtype())};
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace {

Shape reduced_shape(const Shape& s, std::int64_t axis, bool keepdim) {
    Shape out;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.size()); ++i) {
        if (i != axis)
            out.push_back(s[i]);
        else if (keepdim)
            out.push_back(1);
    }
    return out;
}

Tensor extreme(const Tensor& x, std::int64_t axis_in, bool keepdim, bool take_max) {
    const char* name = take_max ? "max" : "min";
    const auto axis = detail::normalize_axis(axis_in, x.dim(), name);
    const auto sp = detail::split_at(x.shape(), axis);
    const Shape out_shape = reduced_shape(x.shape(), axis, keepdim);
    auto out = alloc(x.dtype(), sp.outer * sp.inner);
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(sp.outer * sp.inner));
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
                const T* base = px + o * sp.n * sp.inner + i;
                std::int64_t best = 0;
                for (std::int64_t k = 1; k < sp.n; ++k) {
                    const bool better = take_max ? base[k * sp.inner] > base[best * sp.inner]
                                                 : base[k * sp.inner] < base[best * sp.inner];
                    if (better) best = k;
                }
                po[o * sp.inner + i] = base[best * sp.inner];
                (*arg)[static_cast<std::size_t>(o * sp.inner + i)] = best;
            }
    });
    return make_result(out_shape, out, name, {x}, [x, sp, arg](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const auto r = o * sp.inner + i;
                    po[o * sp.n * sp.inner + (*arg)[static_cast<std::size_t>(r)] * sp.inner + i] += pg[r];
                }
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

}  // namespace

Tensor sum(const Tensor& x, std::int64_t axis_in, bool keepdim) {
    const auto axis = detail::normalize_axis(axis_in, x.dim(), "sum");
    const auto sp = detail::split_at(x.shape(), axis);
    auto out = alloc(x.dtype(), sp.outer * sp.inner);
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t k = 0; k < sp.n; ++k) {
                const T* row = px + (o * sp.n + k) * sp.inner;
                T* dst = po + o * sp.inner;
                for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
            }
    });
    return make_result(reduced_shape(x.shape(), axis, keepdim), out, "sum_axis", {x}, [x, sp](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t k = 0; k < sp.n; ++k)
                    std::copy_n(pg + o * sp.inner, sp.inner, po + (o * sp.n + k) * sp.inner);
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim) {
    const auto a = detail::normalize_axis(axis, x.dim(), "mean");
    return scale(sum(x, a, keepdim), 1.0 / static_cast<double>(x.shape()[a]));
}

Tensor max(const Tensor& x, std::int64_t axis, bool keepdim) { return extreme(x, axis, keepdim, true); }
Tensor min(const Tensor& x, std::int64_t axis, bool keepdim) { return extreme(x, axis, keepdim, false); }

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& x, Shape shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw DimensionError("reshape: more than one -1 in " + shape_str(shape));
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    const Shape in_shape = x.shape();
    return make_result(shape, x.storage(), "reshape", {x}, [in_shape](const Tensor& g) {
        return std::vector<Tensor>{Tensor::from_storage(in_shape, g.storage())};
    });
}

Tensor flatten(const Tensor& x, std::int64_t start_axis) {
    start_axis = detail::normalize_axis(start_axis, x.dim(), "flatten");
    Shape s(x.shape().begin(), x.shape().begin() + start_axis);
    s.push_back(-1);
    return reshape(x, s);
}

namespace {

std::shared_ptr<Storage> transpose_last2(const Tensor& x) {
    const auto rank = x.dim();
    const auto m = x.shape()[rank - 2], n = x.shape()[rank - 1];
    const auto batch = x.numel() / (m * n);
    auto out = alloc(x.dtype(), x.numel());
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t b = 0; b < batch; ++b) {
            const T* src = px + b * m * n;
            T* dst = po + b * m * n;
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
        }
    });
    return out;
}

}  // namespace

Tensor transpose(const Tensor& x) {
    if (x.dim() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
    Shape s = x.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    return make_result(s, transpose_last2(x), "transpose", {x}, [s](const Tensor& g) {
        return std::vector<Tensor>{Tensor::from_storage(
            [&] {
                Shape t = s;
                std::swap(t[t.size() - 1], t[t.size() - 2]);
                return t;
            }(),
            transpose_last2(g))};
    });
}

Tensor slice(const Tensor& x, std::int64_t axis_in, std::int64_t begin, std::int64_t end) {
    const auto axis = detail::normalize_axis(axis_in, x.dim(), "slice");
    const auto sp = detail::split_at(x.shape(), axis);
    if (begin < 0 || end > sp.n || begin >= end)
        throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for extent " + std::to_string(sp.n));
    Shape s = x.shape();
    s[axis] = end - begin;
    const auto len = end - begin;
    auto out = alloc(x.dtype(), sp.outer * len * sp.inner);
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            std::copy_n(px + (o * sp.n + begin) * sp.inner, len * sp.inner, po + o * len * sp.inner);
    });
    return make_result(s, out, "slice", {x}, [x, sp, begin, len](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t o = 0; o < sp.outer; ++o)
                std::copy_n(pg + o * len * sp.inner, len * sp.inner, po + (o * sp.n + begin) * sp.inner);
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

Tensor concat(std::span<const Tensor> parts, std::int64_t axis_in) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Tensor& first = parts.front();
    const auto axis = detail::normalize_axis(axis_in, first.dim(), "concat");
    Shape s = first.shape();
    std::int64_t total = 0;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        detail::require_same_dtype(first, p, "concat");
        if (p.dim() != first.dim()) throw DimensionError("concat: rank mismatch");
        for (std::int64_t i = 0; i < first.dim(); ++i)
            if (i != axis && p.shape()[i] != s[i])
                throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " +
                                     shape_str(first.shape()));
        extents.push_back(p.shape()[axis]);
        total += p.shape()[axis];
    }
    s[axis] = total;
    const auto sp = detail::split_at(s, axis);
    auto out = alloc(first.dtype(), shape_numel(s));
    visit_dtype(first.dtype(), [&]<typename T>() {
        T* po = out->as<T>();
        std::int64_t offset = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const T* pp = parts[k].data<T>();
            const auto len = extents[k];
            for (std::int64_t o = 0; o < sp.outer; ++o)
                std::copy_n(pp + o * len * sp.inner, len * sp.inner, po + (o * total + offset) * sp.inner);
            offset += len;
        }
    });
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result(s, out, "concat", inputs, [inputs, axis, extents](const Tensor& g) {
        std::vector<Tensor> grads;
        std::int64_t offset = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (inputs[k].requires_grad())
                grads.push_back(slice(g, axis, offset, offset + extents[k]));
            else
                grads.emplace_back();
            offset += extents[k];
        }
        return grads;
    });
}

Tensor stack(std::span<const Tensor> parts, std::int64_t axis) {
    if (parts.empty()) throw DimensionError("stack: no inputs");
    const auto rank = parts.front().dim() + 1;
    axis = detail::normalize_axis(axis, rank, "stack");
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape() != parts.front().shape()) throw DimensionError("stack: shape mismatch");
        Shape s = p.shape();
        s.insert(s.begin() + axis, 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, axis);
}

Tensor index_select(const Tensor& x, std::int64_t axis_in, std::span<const std::int64_t> indices) {
    const auto axis = detail::normalize_axis(axis_in, x.dim(), "index_select");
    const auto sp = detail::split_at(x.shape(), axis);
    if (indices.empty()) throw DimensionError("index_select: empty index list");
    for (auto i : indices)
        if (i < 0 || i >= sp.n) throw DimensionError("index_select: index " + std::to_string(i) + " out of range");
    const auto k = static_cast<std::int64_t>(indices.size());
    Shape s = x.shape();
    s[axis] = k;
    auto idx = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
    auto out = alloc(x.dtype(), sp.outer * k * sp.inner);
    visit_dtype(x.dtype(), [&]<typename T>() {
        const T* px = x.data<T>();
        T* po = out->as<T>();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t j = 0; j < k; ++j)
                std::copy_n(px + (o * sp.n + (*idx)[j]) * sp.inner, sp.inner, po + (o * k + j) * sp.inner);
    });
    return make_result(s, out, "index_select", {x}, [x, sp, idx, k](const Tensor& g) {
        auto gx = alloc(x.dtype(), x.numel());
        visit_dtype(x.dtype(), [&]<typename T>() {
            const T* pg = g.data<T>();
            T* po = gx->as<T>();
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t j = 0; j < k; ++j) {
                    const T* src = pg + (o * k + j) * sp.inner;
                    T* dst = po + (o * sp.n + (*idx)[j]) * sp.inner;
                    for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                }
        });
        return std::vector<Tensor>{Tensor::from_storage(x.shape(), gx)};
    });
}

}  // namespace prvql::ops
