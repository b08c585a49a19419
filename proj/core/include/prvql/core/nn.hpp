#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "prvql/core/ops.hpp"
#include "prvql/core/tensor.hpp"

namespace prvql {

// SplitMix64 generator. Portable bit-exact streams across platforms, unlike
// the standard distributions.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }
    // Independent child stream.
    Rng fork(std::uint64_t salt);

   private:
    std::uint64_t state_;
};

struct Parameter {
    std::string name;
    Tensor tensor;
};

class ParameterStore {
   public:
    explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

    // Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor uniform(const std::string& name, const Shape& shape, std::int64_t fan_in);
    Tensor uniform_range(const std::string& name, const Shape& shape, double bound);
    Tensor constant(const std::string& name, const Shape& shape, double value);

    const std::vector<Parameter>& params() const { return params_; }
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.contains(name); }
    std::int64_t total_elements() const;
    void zero_grad();

   private:
    Tensor add(const std::string& name, Tensor tensor);

    Rng rng_;
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace nn {

class Linear {
   public:
    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out, bool bias = true);
    // x: [..., in] -> [..., out]
    Tensor operator()(const Tensor& x) const;

    Tensor weight, bias;
};

class LayerNorm {
   public:
    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& name, std::int64_t channels);
    Tensor operator()(const Tensor& x) const;

    Tensor gamma, beta;
};

class Conv2d {
   public:
    Conv2d() = default;
    Conv2d(ParameterStore& store, const std::string& name, std::int64_t kernel, std::int64_t in, std::int64_t out,
           std::int64_t stride = 1, bool bias = true);
    // x: [N,H,W,in]; "same" padding for odd kernels.
    Tensor operator()(const Tensor& x) const;

    Tensor weight, bias;
    std::int64_t kernel = 1, stride = 1;
};

// Two-layer MLP with GELU.
class FeedForward {
   public:
    FeedForward() = default;
    FeedForward(ParameterStore& store, const std::string& name, std::int64_t channels, std::int64_t hidden);
    Tensor operator()(const Tensor& x) const;

    Linear fc1, fc2;
};

// 3x3 conv -> GELU -> 1x1 conv.
class ConvBlock {
   public:
    ConvBlock() = default;
    ConvBlock(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
              std::int64_t hidden);
    Tensor operator()(const Tensor& x) const;

    Conv2d conv3, conv1;
};

}  // namespace nn
}  // namespace prvql
