#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "prvql/core/error.hpp"

namespace prvql {

enum class DType : std::uint8_t { kFloat32, kFloat64 };

const char* dtype_name(DType dtype);

// Process-wide element type for newly created tensors. Starts as float32
// unless the PRVQL_FLOAT64 environment variable is set to a non-zero value.
DType default_dtype();
void set_default_dtype(DType dtype);

class DTypeScope {
   public:
    explicit DTypeScope(DType dtype);
    ~DTypeScope();
    DTypeScope(const DTypeScope&) = delete;
    DTypeScope& operator=(const DTypeScope&) = delete;

   private:
    DType previous_;
};

template <class F>
decltype(auto) visit_dtype(DType dtype, F&& fn) {
    if (dtype == DType::kFloat64) return fn.template operator()<double>();
    return fn.template operator()<float>();
}

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, double> ? DType::kFloat64 : DType::kFloat32;
}

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Flat element buffer. Shared between a tensor and its reshaped views.
class Storage {
   public:
    Storage(DType dtype, std::size_t n);

    DType dtype() const { return dtype_; }
    std::size_t size() const;

    template <class T>
    T* as() {
        return std::get<std::vector<T>>(buf_).data();
    }
    template <class T>
    const T* as() const {
        return std::get<std::vector<T>>(buf_).data();
    }

   private:
    DType dtype_;
    std::variant<std::vector<float>, std::vector<double>> buf_;
};

class Tensor;
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

// One recorded op on the tape. Holds its inputs alive; outputs are reachable
// only from downstream nodes, so the graph cannot form a cycle.
struct Node {
    const char* op = "";
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<Storage> data;
    std::shared_ptr<Storage> grad;
    std::shared_ptr<Node> node;
    bool requires_grad = false;
};

class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, DType dtype = default_dtype());
    static Tensor full(const Shape& shape, double value, DType dtype = default_dtype());
    static Tensor ones(const Shape& shape, DType dtype = default_dtype()) { return full(shape, 1.0, dtype); }
    static Tensor scalar(double value, DType dtype = default_dtype()) { return full({}, value, dtype); }
    static Tensor from_values(const Shape& shape, std::span<const double> values, DType dtype = default_dtype());
    static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                              DType dtype = default_dtype());
    static Tensor from_storage(const Shape& shape, std::shared_ptr<Storage> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
    std::int64_t size(std::int64_t axis) const;
    std::int64_t numel() const { return shape_numel(impl_->shape); }
    DType dtype() const { return impl_->data->dtype(); }

    template <class T>
    const T* data() const {
        check_dtype(dtype_of<T>());
        return impl_->data->as<T>();
    }
    // Writes bypass the tape; only for parameter initialization and updates.
    template <class T>
    T* mutable_data() {
        check_dtype(dtype_of<T>());
        return impl_->data->as<T>();
    }
    template <class T>
    std::span<const T> values() const {
        return {data<T>(), static_cast<std::size_t>(numel())};
    }

    double item() const;
    double flat(std::int64_t index) const;
    double at(std::initializer_list<std::int64_t> index) const;
    std::vector<double> to_vector() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag);
    bool is_leaf() const { return impl_->node == nullptr; }
    const char* op_name() const { return impl_->node ? impl_->node->op : "leaf"; }
    const std::shared_ptr<Node>& node() const { return impl_->node; }

    bool has_grad() const { return impl_->grad != nullptr; }
    // The accumulated gradient; an all-zero tensor if nothing reached this one.
    Tensor grad() const;
    void zero_grad();
    void accumulate_grad(const Tensor& g);

    Tensor detach() const;
    Tensor clone() const;
    Tensor to(DType dtype) const;

    const std::shared_ptr<Storage>& storage() const { return impl_->data; }
    TensorImpl* impl() const { return impl_.get(); }

   private:
    friend Tensor make_result(const Shape&, std::shared_ptr<Storage>, const char*, std::vector<Tensor>, BackwardFn);

    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    void check_dtype(DType expected) const;

    std::shared_ptr<TensorImpl> impl_;
};

bool grad_enabled();

class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

// Wraps freshly computed op output. When grad mode is on and any input
// requires a gradient, the result records `backward` on the tape.
Tensor make_result(const Shape& shape, std::shared_ptr<Storage> data, const char* op, std::vector<Tensor> inputs,
                   BackwardFn backward);

// Reverse-mode sweep from a scalar. Leaf tensors with requires_grad receive
// accumulated gradients; intermediate gradients are released once consumed.
void backward(const Tensor& loss);

}  // namespace prvql
