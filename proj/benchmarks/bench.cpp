#include <benchmark/benchmark.h>

#include "prvql/attention.hpp"
#include "prvql/image.hpp"
#include "prvql/inference.hpp"
#include "prvql/training.hpp"

namespace prvql {
namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal();
    return Tensor::from_values(shape, v);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = state.range(0);
    const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(144)->Arg(288);

void BM_MaskedSelfAttention(benchmark::State& state) {
    const auto L = state.range(0);
    ParameterStore store(3);
    MaskedSelfAttention msa(store, "msa", {64, 4, 1, 2});
    const TemporalMask mask(L, 36, 2);
    const auto x = random_tensor({L * 36, 64}, 4);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(msa(x, mask).features);
}
BENCHMARK(BM_MaskedSelfAttention)->Arg(8)->Arg(16);

void BM_RoiAlign(benchmark::State& state) {
    const auto features = random_tensor({12, 12, 64}, 5);
    const auto box = Tensor::from_values({4}, {10.0, 12.0, 40.0, 50.0});
    for (auto _ : state) benchmark::DoNotOptimize(ops::roi_align(features, box, 5, 12.0 / 96.0));
}
BENCHMARK(BM_RoiAlign);

struct Fixture {
    PrvqlModel model;
    QueryVideoPair pair;
    Tensor query, frames;

    explicit Fixture(std::int64_t stages, std::int64_t L)
        : model(config(stages), 7), pair(generate_pair(11, SceneConfig{}, L)) {
        query = image_to_tensor(pair.query);
        std::vector<std::int64_t> all(static_cast<std::size_t>(L));
        for (std::int64_t i = 0; i < L; ++i) all[static_cast<std::size_t>(i)] = i;
        frames = frames_to_tensor(pair.frames, all);
    }
    static ModelConfig config(std::int64_t stages) {
        ModelConfig c;
        c.stages = stages;
        return c;
    }
};

void BM_ModelForward(benchmark::State& state) {
    Fixture f(state.range(0), 8);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(f.model.forward(f.query, f.frames).final_heads().scores);
}
BENCHMARK(BM_ModelForward)->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    Fixture f(state.range(0), 8);
    AdamW optim(f.model.parameters());
    const auto targets = assign_targets(f.model.anchors(), f.pair.gt.boxes);
    const LossConfig loss_config;
    for (auto _ : state) {
        f.model.store().zero_grad();
        const auto loss = total_loss(f.model.forward(f.query, f.frames), targets, loss_config);
        backward(loss.total);
        optim.step();
    }
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
    const auto data = generate_dataset(3, SceneConfig{}, 64, 16);
    const auto gts = ground_truth_tracks(data);
    std::vector<Prediction> preds;
    for (const auto& g : gts) preds.push_back({g.pair_id, g.track});
    for (auto _ : state) benchmark::DoNotOptimize(evaluate(preds, gts));
}
BENCHMARK(BM_Evaluate);

}  // namespace
}  // namespace prvql

BENCHMARK_MAIN();
