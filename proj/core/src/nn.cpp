#include "prvql/core/nn.hpp"

#include <cmath>
#include <numbers>

namespace prvql {

std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ContractError("uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do r = next_u64();
    while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t salt) {
    Rng child(next_u64() ^ (salt * 0xD1B54A32D192ED03ULL));
    child.next_u64();
    return child;
}

Tensor ParameterStore::add(const std::string& name, Tensor tensor) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, params_.size());
    params_.push_back({name, tensor});
    return tensor;
}

Tensor ParameterStore::uniform(const std::string& name, const Shape& shape, std::int64_t fan_in) {
    return uniform_range(name, shape, 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1))));
}

Tensor ParameterStore::uniform_range(const std::string& name, const Shape& shape, double bound) {
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : values) v = rng_.uniform(-bound, bound);
    return add(name, Tensor::from_values(shape, values));
}

Tensor ParameterStore::constant(const std::string& name, const Shape& shape, double value) {
    return add(name, Tensor::full(shape, value));
}

const Parameter& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
}

std::int64_t ParameterStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

namespace nn {

Linear::Linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out, bool with_bias) {
    weight = store.uniform(name + ".weight", {in, out}, in);
    if (with_bias) bias = store.constant(name + ".bias", {out}, 0.0);
}

Tensor Linear::operator()(const Tensor& x) const {
    if (x.shape().back() != weight.shape()[0])
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    Tensor y;
    if (x.dim() == 1) {
        y = ops::reshape(ops::matmul(ops::reshape(x, {1, x.shape()[0]}), weight), {weight.shape()[1]});
    } else {
        y = ops::matmul(x, weight);
    }
    return bias.defined() ? ops::add(y, bias) : y;
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::int64_t channels) {
    gamma = store.constant(name + ".gamma", {channels}, 1.0);
    beta = store.constant(name + ".beta", {channels}, 0.0);
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

Conv2d::Conv2d(ParameterStore& store, const std::string& name, std::int64_t k, std::int64_t in, std::int64_t out,
               std::int64_t s, bool with_bias)
    : kernel(k), stride(s) {
    weight = store.uniform(name + ".weight", {k, k, in, out}, k * k * in);
    if (with_bias) bias = store.constant(name + ".bias", {out}, 0.0);
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, kernel / 2); }

FeedForward::FeedForward(ParameterStore& store, const std::string& name, std::int64_t channels, std::int64_t hidden)
    : fc1(store, name + ".fc1", channels, hidden), fc2(store, name + ".fc2", hidden, channels) {}

Tensor FeedForward::operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }

ConvBlock::ConvBlock(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                     std::int64_t hidden)
    : conv3(store, name + ".conv3", 3, in, hidden),
      conv1(store, name + ".conv1", 1, hidden, out) {}

Tensor ConvBlock::operator()(const Tensor& x) const { return conv1(ops::gelu(conv3(x))); }

}  // namespace nn
}  // namespace prvql
