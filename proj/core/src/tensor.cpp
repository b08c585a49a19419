#include "prvql/core/tensor.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

namespace prvql {

namespace {

DType initial_dtype() {
    const char* env = std::getenv("PRVQL_FLOAT64");
    if (env != nullptr && env[0] != '\0' && std::string(env) != "0") return DType::kFloat64;
    return DType::kFloat32;
}

DType& global_dtype() {
    static DType dtype = initial_dtype();
    return dtype;
}

thread_local bool g_grad_enabled = true;

}  // namespace

const char* dtype_name(DType dtype) { return dtype == DType::kFloat64 ? "float64" : "float32"; }

DType default_dtype() { return global_dtype(); }
void set_default_dtype(DType dtype) { global_dtype() = dtype; }

DTypeScope::DTypeScope(DType dtype) : previous_(default_dtype()) { set_default_dtype(dtype); }
DTypeScope::~DTypeScope() { set_default_dtype(previous_); }

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Storage::Storage(DType dtype, std::size_t n) : dtype_(dtype) {
    if (dtype == DType::kFloat64)
        buf_ = std::vector<double>(n, 0.0);
    else
        buf_ = std::vector<float>(n, 0.0f);
}

std::size_t Storage::size() const {
    return std::visit([](const auto& v) { return v.size(); }, buf_);
}

namespace {

void validate_shape(const Shape& shape) {
    for (auto d : shape)
        if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
    validate_shape(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::make_shared<Storage>(dtype, static_cast<std::size_t>(shape_numel(shape)));
    return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
    Tensor t = zeros(shape, dtype);
    visit_dtype(dtype, [&]<typename T>() {
        T* p = t.mutable_data<T>();
        std::fill(p, p + t.numel(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
    Tensor t = zeros(shape, dtype);
    if (static_cast<std::int64_t>(values.size()) != t.numel())
        throw DimensionError("from_values: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
    visit_dtype(dtype, [&]<typename T>() {
        T* p = t.mutable_data<T>();
        for (std::size_t i = 0; i < values.size(); ++i) p[i] = static_cast<T>(values[i]);
    });
    return t;
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dtype) {
    return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from_storage(const Shape& shape, std::shared_ptr<Storage> data) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(data->size()) != shape_numel(shape))
        throw DimensionError("storage of " + std::to_string(data->size()) + " elements cannot hold " +
                             shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    return Tensor(std::move(impl));
}

std::int64_t Tensor::size(std::int64_t axis) const {
    const auto d = dim();
    if (axis < 0) axis += d;
    if (axis < 0 || axis >= d)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
}

void Tensor::check_dtype(DType expected) const {
    if (dtype() != expected)
        throw ContractError(std::string("tensor holds ") + dtype_name(dtype()) + ", accessed as " +
                            dtype_name(expected));
}

double Tensor::flat(std::int64_t index) const {
    if (index < 0 || index >= numel()) throw DimensionError("flat index out of range");
    return visit_dtype(dtype(), [&]<typename T>() { return static_cast<double>(data<T>()[index]); });
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return flat(0);
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    if (static_cast<std::int64_t>(index.size()) != dim())
        throw DimensionError("index rank does not match " + shape_str(shape()));
    std::int64_t offset = 0;
    std::size_t a = 0;
    for (auto i : index) {
        const auto extent = impl_->shape[a++];
        if (i < 0 || i >= extent) throw DimensionError("index out of range for " + shape_str(shape()));
        offset = offset * extent + i;
    }
    return flat(offset);
}

std::vector<double> Tensor::to_vector() const {
    return visit_dtype(dtype(), [&]<typename T>() {
        auto v = values<T>();
        return std::vector<double>(v.begin(), v.end());
    });
}

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
}

Tensor Tensor::grad() const {
    if (impl_->grad) return from_storage(shape(), impl_->grad);
    return zeros(shape(), dtype());
}

void Tensor::zero_grad() { impl_->grad.reset(); }

void Tensor::accumulate_grad(const Tensor& g) {
    if (g.shape() != shape())
        throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match tensor " +
                             shape_str(shape()));
    if (g.dtype() != dtype()) throw ContractError("gradient dtype mismatch");
    const auto n = static_cast<std::size_t>(numel());
    if (!impl_->grad) {
        impl_->grad = std::make_shared<Storage>(dtype(), n);
    }
    visit_dtype(dtype(), [&]<typename T>() {
        T* dst = impl_->grad->as<T>();
        const T* src = g.data<T>();
        for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
    });
}

Tensor Tensor::detach() const { return from_storage(shape(), impl_->data); }

Tensor Tensor::clone() const {
    Tensor out = zeros(shape(), dtype());
    visit_dtype(dtype(), [&]<typename T>() { std::copy_n(data<T>(), numel(), out.mutable_data<T>()); });
    return out;
}

Tensor Tensor::to(DType target) const {
    Tensor out = zeros(shape(), target);
    visit_dtype(dtype(), [&]<typename S>() {
        visit_dtype(target, [&]<typename D>() {
            const S* src = data<S>();
            D* dst = out.mutable_data<D>();
            for (std::int64_t i = 0; i < numel(); ++i) dst[i] = static_cast<D>(src[i]);
        });
    });
    return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const Shape& shape, std::shared_ptr<Storage> data, const char* op, std::vector<Tensor> inputs,
                   BackwardFn backward_fn) {
    Tensor out = Tensor::from_storage(shape, std::move(data));
    if (!g_grad_enabled) return out;
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!needs) return out;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    out.impl_->node = std::move(node);
    out.impl_->requires_grad = true;
    return out;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward: loss is not connected to any parameter");

    // Iterative post-order DFS gives a topological order of the tape.
    std::vector<Tensor> order;
    std::unordered_set<const TensorImpl*> visited;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    visited.insert(loss.impl());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        const auto& node = t.node();
        if (node && next < node->inputs.size()) {
            const Tensor child = node->inputs[next++];
            if (child.defined() && child.requires_grad() && visited.insert(child.impl()).second)
                stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }

    NoGradGuard no_grad;
    loss.impl()->grad.reset();
    const_cast<Tensor&>(loss).accumulate_grad(Tensor::ones(loss.shape(), loss.dtype()));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor& t = *it;
        const auto& node = t.node();
        if (!node || !t.has_grad()) continue;
        const Tensor g = t.grad();
        std::vector<Tensor> grads = node->backward(g);
        for (std::size_t i = 0; i < grads.size() && i < node->inputs.size(); ++i) {
            Tensor& input = node->inputs[i];
            if (!input.defined() || !input.requires_grad() || !grads[i].defined()) continue;
            input.accumulate_grad(grads[i]);
        }
        t.zero_grad();
    }
}

}  // namespace prvql
