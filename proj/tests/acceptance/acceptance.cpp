#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../support/metric_oracle.hpp"
#include "cli.hpp"
#include "prvql/core/checkpoint.hpp"
#include "prvql/grad_blocks.hpp"
#include "prvql/image.hpp"
#include "prvql/inference.hpp"
#include "prvql/knowledge.hpp"
#include "prvql/refinement.hpp"
#include "prvql/training.hpp"

namespace prvql::acceptance {
namespace {

// Tolerances and budgets.
constexpr double kBlockTol = 1e-4;
constexpr double kModelTol = 1e-3;
constexpr double kGradSeconds = 120;
constexpr int kAttentionInputs = 100;
constexpr double kRowSumTol = 1e-6;
constexpr int kMetricFixtures = 50;
constexpr double kMetricTol = 1e-9;
constexpr double kOverfitDrop = 0.90;
constexpr double kOverfitSucc = 90.0;  // percent
constexpr double kOverfitSeconds = 600;
constexpr double kTrendMargin = 0.01;
constexpr double kTrendSeconds = 3600;

// Overfit run.
constexpr std::int64_t kOverfitPairs = 8, kOverfitFrames = 8, kOverfitStages = 2, kOverfitIterations = 500;
constexpr std::int64_t kOverfitBatch = 4, kOverfitWarmup = 25;
constexpr double kOverfitLr = 1e-3;

// Progressive trend run.
constexpr std::uint64_t kTrendSeeds[] = {1, 2, 3};
constexpr std::int64_t kTrendTrainPairs = 64, kTrendValPairs = 64, kTrendFrames = 16;
constexpr std::int64_t kTrendIterations = 2000, kTrendBatch = 1, kTrendWarmup = 25;
constexpr double kTrendLr = 1e-3;
constexpr std::uint64_t kTrendTrainData = 101, kTrendValData = 202;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    bool pass = true;
    double worst_block = 0, worst_model = 0;
    std::string failed;
    const auto blocks = gradient_check_blocks();
    for (const auto& b : blocks) {
        GradCheckOptions options;
        const bool model = b.name == "full_model";
        options.tol = model ? kModelTol : kBlockTol;
        const auto report = b.run(options, 0);
        (model ? worst_model : worst_block) = std::max(model ? worst_model : worst_block, report.max_rel_error);
        std::printf("  block %-22s max_rel_error %.3e tol %.0e %s\n", b.name.c_str(), report.max_rel_error, options.tol,
                    report.passed ? "ok" : "FAIL");
        if (!report.passed) {
            pass = false;
            failed += " " + b.name;
        }
    }
    const std::set<std::string> required = {"cross_attention", "masked_self_attention", "conv_block", "roi_align",
                                            "detection_heads", "query_refinement", "video_refinement", "full_model"};
    for (const auto& name : required)
        if (std::none_of(blocks.begin(), blocks.end(), [&](const GradBlock& b) { return b.name == name; })) {
            pass = false;
            failed += " missing:" + name;
        }
    const double s = seconds_since(t0);
    pass = pass && s < kGradSeconds;
    return {pass, fmt("%zu blocks, worst block %.2e < %.0e, full model %.2e < %.0e, %.1f s < %.0f s%s", blocks.size(),
                      worst_block, kBlockTol, worst_model, kModelTol, s, kGradSeconds, failed.c_str())};
}

Tensor random_tensor(const Shape& shape, Rng& rng, double scale) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::from_values(shape, v);
}

Outcome attention_invariants() {
    Rng rng(2);
    double worst = 0;
    std::int64_t leaks = 0, rows = 0;
    for (int trial = 0; trial < kAttentionInputs; ++trial) {
        const auto L = rng.uniform_int(1, 6), hw = rng.uniform_int(1, 6);
        const std::int64_t u = trial % 3;
        ParameterStore store(static_cast<std::uint64_t>(trial));
        MaskedSelfAttention msa(store, "msa", {8, 2, 1, 2});
        CrossAttentionBlock cab(store, "cab", {8, 2, 1, 2});
        const double scale = rng.uniform(0.1, 5.0);
        const auto video = random_tensor({L * hw, 8}, rng, scale);
        const auto a = msa(video, TemporalMask(L, hw, u)).attn.to_vector();
        for (std::int64_t r = 0; r < L * hw; ++r) {
            double sum = 0;
            for (std::int64_t q = 0; q < L * hw; ++q) {
                const double v = a[static_cast<std::size_t>(r * L * hw + q)];
                if (std::abs(r / hw - q / hw) > u && v != 0.0) ++leaks;
                sum += v;
            }
            worst = std::max(worst, std::abs(sum - 1.0));
            ++rows;
        }
        const auto keys = rng.uniform_int(1, 9);
        const auto c = cab(random_tensor({L, hw, 8}, rng, scale), random_tensor({keys, 8}, rng, scale)).attn.to_vector();
        for (std::size_t r = 0; r < c.size() / static_cast<std::size_t>(keys); ++r) {
            double sum = 0;
            for (std::int64_t q = 0; q < keys; ++q) sum += c[r * static_cast<std::size_t>(keys) + static_cast<std::size_t>(q)];
            worst = std::max(worst, std::abs(sum - 1.0));
            ++rows;
        }
    }
    return {worst <= kRowSumTol && leaks == 0,
            fmt("%d inputs, %lld rows, max |row sum - 1| %.2e <= %.0e, %lld out-of-window nonzeros", kAttentionInputs,
                static_cast<long long>(rows), worst, kRowSumTol, static_cast<long long>(leaks))};
}

Outcome metric_equivalence() {
    Rng rng(3);
    double worst = 0;
    for (int trial = 0; trial < kMetricFixtures; ++trial) {
        const auto fx = oracle::random_fixture(rng);
        const auto got = evaluate(fx.predictions, fx.gts);
        const auto want = oracle::evaluate(fx.predictions, fx.gts);
        worst = std::max({worst, std::abs(got.tap25 - want.tap25), std::abs(got.stap25 - want.stap25),
                          std::abs(got.recovery - want.recovery), std::abs(got.success - want.success)});
        const auto a = oracle::random_track(rng), b = oracle::random_track(rng);
        worst = std::max({worst, std::abs(temporal_iou(a.start, a.end, b.start, b.end) - oracle::temporal_iou(a, b)),
                          std::abs(tube_stiou(a, b) - oracle::tube_stiou(a, b))});
        std::vector<Detection> dets;
        for (int i = 0; i < 6; ++i)
            dets.push_back({std::round(rng.uniform() * 4) / 4, rng.bernoulli(0.5), "d" + std::to_string(i)});
        worst = std::max(worst, std::abs(average_precision(dets, 6) - oracle::average_precision(dets, 6)));
    }
    const double tiou = temporal_iou(1, 5, 3, 7);
    const double ap = average_precision({{0.9, true, "a"}, {0.8, false, "b"}, {0.7, true, "c"}}, 2);
    const double g = giou({0, 0, 1, 1}, {2, 2, 3, 3});
    const bool traces = std::abs(tiou - 3.0 / 7.0) <= kMetricTol && std::abs(ap - 5.0 / 6.0) <= kMetricTol &&
                        std::abs(g + 7.0 / 9.0) <= kMetricTol;
    return {worst <= kMetricTol && traces,
            fmt("%d fixtures, max deviation %.2e <= %.0e; tIoU %.6f (3/7), AP %.6f (5/6), GIoU %.6f (-7/9)",
                kMetricFixtures, worst, kMetricTol, tiou, ap, g)};
}

Outcome inference_trace() {
    const std::vector<double> s = {0.1, 0.9, 0.2, 0.85, 0.3};
    const std::vector<Box> boxes(5, Box{0, 0, 1, 1});
    const auto t = infer_track(s, boxes);
    const bool trace = t && t->start == 3 && t->end == 3;
    Rng rng(4);
    std::int64_t mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x(static_cast<std::size_t>(rng.uniform_int(1, 40)));
        for (auto& v : x) v = rng.uniform(0, 1);
        const std::vector<Box> b(x.size(), Box{0, 0, 1, 1});
        const auto base = infer_track(x, b);
        for (double c : {0.5, 2.0}) {
            auto y = x;
            for (auto& v : y) v *= c;
            const auto scaled = infer_track(y, b);
            if (scaled.has_value() != base.has_value() ||
                (base && (scaled->start != base->start || scaled->end != base->end)))
                ++mismatches;
        }
    }
    return {trace && mismatches == 0,
            fmt("track %s, scale invariance mismatches %lld / 400",
                t ? fmt("[%lld, %lld]", static_cast<long long>(t->start), static_cast<long long>(t->end)).c_str() : "none",
                static_cast<long long>(mismatches))};
}

EvalReport evaluate_model(const PrvqlModel& model, const std::vector<QueryVideoPair>& pairs) {
    std::vector<Prediction> preds;
    for (const auto& p : pairs) preds.push_back(predict_pair(model, p));
    return evaluate(preds, ground_truth_tracks(pairs));
}

Outcome overfit_run() {
    const auto t0 = Clock::now();
    ModelConfig mc;
    mc.stages = kOverfitStages;
    PrvqlModel model(mc, 7);
    const auto data = generate_dataset(11, SceneConfig{}, kOverfitPairs, kOverfitFrames, "overfit");
    TrainConfig tc;
    tc.iterations = kOverfitIterations;
    tc.clip_length = kOverfitFrames;
    tc.batch = kOverfitBatch;
    tc.warmup = kOverfitWarmup;
    tc.optim.lr = kOverfitLr;
    tc.seed = 3;
    const auto result = train(model, data, tc, [](const IterationLog& e) {
        if (e.iteration == 1 || e.iteration % 100 == 0)
            std::printf("  iter %4lld loss %.4f\n", static_cast<long long>(e.iteration), e.total);
        std::fflush(stdout);
    });
    const double first = result.log.front().total, last = result.log.back().total;
    const double drop = 1.0 - last / first;
    const auto report = evaluate_model(model, data);
    const double s = seconds_since(t0);
    return {drop >= kOverfitDrop && report.success >= kOverfitSucc && s < kOverfitSeconds,
            fmt("loss %.3f -> %.3f, drop %.1f%% >= %.0f%%; train Succ %.1f%% >= %.0f%%; %.0f s < %.0f s", first, last,
                100 * drop, 100 * kOverfitDrop, report.success, kOverfitSucc, s, kOverfitSeconds)};
}

Outcome progressive_trend() {
    const auto t0 = Clock::now();
    const auto train_set = generate_dataset(kTrendTrainData, SceneConfig{}, kTrendTrainPairs, kTrendFrames, "train");
    const auto val = generate_dataset(kTrendValData, SceneConfig{}, kTrendValPairs, kTrendFrames, "val");
    double mean[2] = {0, 0};
    const std::int64_t stages[2] = {1, 3};
    for (auto seed : kTrendSeeds) {
        for (int i = 0; i < 2; ++i) {
            ModelConfig mc;
            mc.stages = stages[i];
            PrvqlModel model(mc, seed);
            TrainConfig tc;
            tc.iterations = kTrendIterations;
            tc.batch = kTrendBatch;
            tc.warmup = kTrendWarmup;
            tc.optim.lr = kTrendLr;
            tc.seed = seed;
            const auto log = train(model, train_set, tc).log;
            const auto r = evaluate_model(model, val);
            mean[i] += r.stap25 / static_cast<double>(std::size(kTrendSeeds));
            std::printf("  seed %llu K=%lld final loss %.3f val tAP25 %.3f stAP25 %.3f rec %.1f%% Succ %.1f%% (%.0f s)\n",
                        static_cast<unsigned long long>(seed), static_cast<long long>(stages[i]), log.back().total,
                        r.tap25, r.stap25, r.recovery, r.success, seconds_since(t0));
            std::fflush(stdout);
        }
    }
    const double s = seconds_since(t0);
    return {mean[1] >= mean[0] - kTrendMargin && s < kTrendSeconds,
            fmt("mean stAP25 K=3 %.4f vs K=1 %.4f (margin %.2f); %.0f s < %.0f s", mean[1], mean[0], kTrendMargin, s,
                kTrendSeconds)};
}

bool bit_equal(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.to_vector() == b.to_vector(); }

Outcome endpoint_identities() {
    DTypeScope scope(DType::kFloat64);
    Rng rng(8);
    std::vector<std::string> failed;
    auto check = [&](bool ok, const char* what) {
        if (!ok) failed.emplace_back(what);
    };

    const auto video = random_tensor({3, 16, 8}, rng, 1.0);
    const auto saliency = ops::sigmoid(random_tensor({3, 16}, rng, 1.0));
    check(bit_equal(refine_video(saliency, video, 0.0), video), "vfr beta=0");

    const SkgGeometry g{4, 4, 2, 2, 3, 3};
    const auto cross = random_tensor({2, 16, 9}, rng, 1.0), temporal = random_tensor({2, 4, 8}, rng, 1.0);
    check(bit_equal(spatial_knowledge(cross, temporal, 0.0, g).maps, cross), "skg alpha=0");
    auto t = ops::bilinear_resize(ops::reshape(extract_diagonal_blocks(temporal), {2, 2, 2, 4}), 4, 4);
    t = ops::transpose(ops::reshape(t, {2, 16, 4}));
    t = ops::bilinear_resize(ops::reshape(t, {2, 2, 2, 16}), 3, 3);
    t = ops::transpose(ops::reshape(t, {2, 9, 16}));
    check(bit_equal(spatial_knowledge(cross, temporal, 1.0, g).maps, t), "skg alpha=1");

    const auto query = random_tensor({9, 8}, rng, 1.0);
    for (auto mode : {QfrMode::kCrossAttention, QfrMode::kAddition, QfrMode::kConcatenation}) {
        ParameterStore store(9);
        QueryRefiner qfr(store, "qfr", mode, {8, 2, 1, 2}, 16);
        check(bit_equal(qfr(query, AppearanceKnowledge{}), query), "qfr empty knowledge");
    }

    ModelConfig mc;
    mc.stages = 1;
    PrvqlModel model(mc, 10);
    const auto pair = generate_pair(12, SceneConfig{}, 4);
    const auto out = model.forward(image_to_tensor(pair.query), frames_to_tensor(pair.frames, std::vector<std::int64_t>{0, 1, 2, 3}));
    const auto& c = out.counters;
    check(c.akg_calls == 0 && c.skg_calls == 0 && c.qfr_calls == 0 && c.vfr_calls == 0 && c.head_calls == 1,
          "K=1 counters");
    check(!out.stages[0].appearance && !out.stages[0].spatial, "K=1 knowledge");

    std::string detail = fmt("vfr, skg (alpha 0/1), qfr x3, K=1 counters akg %lld skg %lld qfr %lld vfr %lld",
                             static_cast<long long>(c.akg_calls), static_cast<long long>(c.skg_calls),
                             static_cast<long long>(c.qfr_calls), static_cast<long long>(c.vfr_calls));
    for (const auto& f : failed) detail += "; failed " + f;
    return {failed.empty(), detail};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Runs gen-data, train, infer and eval into `root` and returns every output file's bytes keyed by relative path.
std::map<std::string, std::string> pipeline(const std::filesystem::path& root) {
    std::filesystem::remove_all(root);
    std::filesystem::create_directories(root);
    cli::RunConfig c;
    c.seed = 21;
    c.model.stages = 2;
    c.model.frame_side = c.model.query_side = 32;
    c.model.channels = 16;
    c.model.heads = 2;
    c.model.backbone_depth = 1;
    c.model.max_frames = 8;
    c.model.tau = 0.3;
    c.model.roi_pool = 2;
    c.model.head_hidden = 8;
    c.scene.canvas = c.scene.query_side = 32;
    c.scene.min_radius = 3;
    c.scene.max_radius = 4;
    c.train.iterations = 5;
    c.train.clip_length = 4;
    std::ofstream(root / "run.json") << cli::run_config_to_json(c);
    const std::string cfg = (root / "run.json").string();
    std::ostringstream out, err;
    auto run = [&](std::vector<std::string> args) {
        if (cli::run(args, out, err) != 0) throw ContractError("pipeline step failed: " + err.str());
    };
    run({"gen-data", "--config", cfg, "--pairs", "3", "--frames", "6", "--out", (root / "data").string()});
    run({"train", "--config", cfg, "--data", (root / "data").string(), "--out", (root / "run").string(), "--log-every", "0"});
    run({"infer", "--config", cfg, "--data", (root / "data").string(), "--checkpoint",
         (root / "run" / "checkpoints" / "final.ckpt").string(), "--out", (root / "pred").string(), "--dump-saliency",
         "--dump-knowledge"});
    run({"eval", "--config", cfg, "--data", (root / "data").string(), "--predictions",
         (root / "pred" / "predictions.jsonl").string(), "--out", (root / "report.json").string()});
    std::map<std::string, std::string> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[std::filesystem::relative(e.path(), root).string()] = slurp(e.path());
    // Console output names the output directories; compare it relative to the root.
    std::string console = out.str();
    for (auto at = console.find(root.string()); at != std::string::npos; at = console.find(root.string()))
        console.replace(at, root.string().size(), "<root>");
    files["stdout"] = console;
    return files;
}

Outcome determinism_and_persistence() {
    const auto base = std::filesystem::temp_directory_path() / "prvql_acceptance";
    const auto a = pipeline(base / "a"), b = pipeline(base / "b");
    std::int64_t differing = 0;
    for (const auto& [name, bytes] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second != bytes) ++differing;
    }
    differing += static_cast<std::int64_t>(b.size()) - static_cast<std::int64_t>(a.size());

    PrvqlModel source(ModelConfig{}, 31), target(ModelConfig{}, 32);
    const auto ckpt = base / "model.ckpt", again = base / "model_again.ckpt";
    save_checkpoint(ckpt, source.parameters());
    load_checkpoint(ckpt, target.parameters());
    save_checkpoint(again, target.parameters());
    std::int64_t tensors_differ = 0;
    const auto ps = source.parameters(), pt = target.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) tensors_differ += !bit_equal(ps[i].tensor, pt[i].tensor);
    const bool same_bytes = slurp(ckpt) == slurp(again);
    std::filesystem::remove_all(base);
    return {differing == 0 && tensors_differ == 0 && same_bytes,
            fmt("pipeline outputs compared %zu, differing %lld; checkpoint tensors %zu, differing %lld, re-save %s",
                a.size(), static_cast<long long>(differing), ps.size(), static_cast<long long>(tensors_differ),
                same_bytes ? "identical" : "differs")};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace
}  // namespace prvql::acceptance

int main(int argc, char** argv) {
    using namespace prvql::acceptance;
    CLI::App app{"Acceptance suite"};
    std::vector<int> only;
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", gradient_correctness},
        {2, "attention invariants", attention_invariants},
        {3, "metric oracle equivalence", metric_equivalence},
        {4, "inference trace", inference_trace},
        {5, "overfit run", overfit_run},
        {6, "progressive trend", progressive_trend},
        {7, "endpoint identities", endpoint_identities},
        {8, "determinism and persistence", determinism_and_persistence},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("criterion %d %s: %s (%s)\n", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
