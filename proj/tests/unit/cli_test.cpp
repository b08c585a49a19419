#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "prvql/image.hpp"
#include "test_util.hpp"

namespace prvql::cli {
namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// A run config small enough for a few seconds of CPU time.
std::string write_small_config(const std::filesystem::path& dir) {
    RunConfig c;
    c.seed = 4;
    c.model.stages = 2;
    c.model.frame_side = 32;
    c.model.query_side = 32;
    c.model.channels = 8;
    c.model.backbone_depth = 1;
    c.model.heads = 2;
    c.model.max_frames = 8;
    c.model.window = 1;
    c.model.tau = 0.3;
    c.model.top_n = 2;
    c.model.roi_pool = 2;
    c.model.head_hidden = 8;
    c.scene.canvas = 32;
    c.scene.query_side = 32;
    c.scene.min_radius = 3;
    c.scene.max_radius = 4;
    c.train.iterations = 2;
    c.train.clip_length = 3;
    const auto path = dir / "run.json";
    std::ofstream(path) << run_config_to_json(c);
    return path.string();
}

TEST(CliTest, GenDataIsReproducible) {
    test::TempDir dir("cli_gen");
    const auto cfg = write_small_config(dir.path());
    const auto a = (dir.path() / "a").string(), b = (dir.path() / "b").string();
    auto r = invoke({"gen-data", "--config", cfg, "--pairs", "2", "--frames", "4", "--out", a});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("wrote 2 pairs"), std::string::npos) << r.out;
    ASSERT_EQ(invoke({"gen-data", "--config", cfg, "--pairs", "2", "--frames", "4", "--out", b}).code, 0);
    for (const char* rel : {"manifest.json", "pair_00000/annotation.json", "pair_00001/frame_0003.ppm", "pair_00000/query.ppm"})
        EXPECT_EQ(slurp(std::filesystem::path(a) / rel), slurp(std::filesystem::path(b) / rel)) << rel;
    const auto c = (dir.path() / "c").string();
    ASSERT_EQ(invoke({"gen-data", "--config", cfg, "--seed", "5", "--pairs", "2", "--frames", "4", "--out", c}).code, 0);
    EXPECT_NE(slurp(std::filesystem::path(a) / "pair_00000/annotation.json"),
              slurp(std::filesystem::path(c) / "pair_00000/annotation.json"));
}

TEST(CliTest, UsageErrors) {
    auto r = invoke({"gen-data", "--pairs", "0", "--out", "/tmp/never"});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error: usage:", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
    EXPECT_EQ(invoke({"gen-data", "--pairs", "1", "--bogus", "--out", "x"}).code, 2);
    EXPECT_EQ(invoke({}).code, 2);
    EXPECT_EQ(invoke({"frobnicate"}).code, 2);
    EXPECT_EQ(invoke({"gradcheck", "--block", "no_such_block"}).code, 2);
    r = invoke({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST(CliTest, ConfigErrorsAreReported) {
    test::TempDir dir("cli_cfg");
    const auto path = dir.path() / "bad.json";
    std::ofstream(path) << R"({"model": {"stages": 0}})";
    auto r = invoke({"gen-data", "--config", path.string(), "--pairs", "1", "--out", (dir.path() / "d").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: config:", 0), 0u) << r.err;
    std::ofstream(path) << R"({"modle": {}})";
    r = invoke({"gen-data", "--config", path.string(), "--pairs", "1", "--out", (dir.path() / "d").string()});
    EXPECT_EQ(r.code, 1);
}

TEST(CliTest, TrainInferEvalPipeline) {
    test::TempDir dir("cli_pipe");
    const auto cfg = write_small_config(dir.path());
    const auto data = (dir.path() / "data").string(), run_dir = (dir.path() / "run").string();
    const auto pred_dir = (dir.path() / "pred").string();
    ASSERT_EQ(invoke({"gen-data", "--config", cfg, "--pairs", "2", "--frames", "5", "--out", data}).code, 0);

    auto r = invoke({"train", "--config", cfg, "--data", data, "--out", run_dir, "--log-every", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("iter 2 loss"), std::string::npos) << r.out;
    const auto ckpt = std::filesystem::path(run_dir) / "checkpoints" / "final.ckpt";
    ASSERT_TRUE(std::filesystem::exists(ckpt));
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(run_dir) / "loss.csv"));
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(run_dir) / "config.json"));

    r = invoke({"infer", "--config", cfg, "--data", data, "--checkpoint", ckpt.string(), "--out", pred_dir,
                "--dump-saliency", "--dump-knowledge"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto preds = read_predictions(std::filesystem::path(pred_dir) / "predictions.jsonl");
    EXPECT_EQ(preds.size(), 2u);
    const auto sal = read_pnm(std::filesystem::path(pred_dir) / "saliency" / "pair_00000" / "stage1_frame_0004.pgm");
    EXPECT_EQ(sal.width, 32);
    EXPECT_EQ(sal.height, 32);
    EXPECT_FALSE(std::filesystem::exists(std::filesystem::path(pred_dir) / "saliency" / "pair_00000" / "stage2_frame_0000.pgm"));
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(pred_dir) / "knowledge.jsonl"));

    const auto report = (dir.path() / "report.json").string();
    r = invoke({"eval", "--data", data, "--predictions", (std::filesystem::path(pred_dir) / "predictions.jsonl").string(),
                "--out", report});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("stAP25"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(report));

    r = invoke({"infer", "--config", cfg, "--data", data, "--checkpoint", (dir.path() / "nope.ckpt").string(), "--out",
                pred_dir});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: io:", 0), 0u) << r.err;
}

TEST(CliTest, EvalPerfectAndEmptyPredictions) {
    test::TempDir dir("cli_eval");
    const auto cfg = write_small_config(dir.path());
    const auto data = (dir.path() / "data").string();
    ASSERT_EQ(invoke({"gen-data", "--config", cfg, "--pairs", "3", "--frames", "4", "--out", data}).code, 0);
    std::vector<Prediction> perfect;
    for (const auto& gt : ground_truth_tracks(load_dataset(data))) {
        auto t = gt.track;
        t.score = 0.9;
        perfect.push_back({gt.pair_id, t});
    }
    const auto path = dir.path() / "perfect.jsonl";
    write_predictions(path, perfect);
    auto r = invoke({"eval", "--data", data, "--predictions", path.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("tAP25 1 stAP25 1 rec% 100 Succ 100"), std::string::npos) << r.out;

    const auto empty = dir.path() / "empty.jsonl";
    std::ofstream(empty) << "";
    r = invoke({"eval", "--data", data, "--predictions", empty.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("tAP25 0 stAP25 0 rec% 0 Succ 0"), std::string::npos) << r.out;

    std::ofstream(empty) << "{not json}\n";
    r = invoke({"eval", "--data", data, "--predictions", empty.string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: parse:", 0), 0u) << r.err;
}

TEST(CliTest, GradcheckPassesAndDetectsFault) {
    auto r = invoke({"gradcheck", "--block", "conv_block", "--block", "giou_loss"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("gradcheck 2/2 blocks passed"), std::string::npos) << r.out;
    r = invoke({"gradcheck", "--block", "giou_loss", "--inject-fault"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("block fault_injection"), std::string::npos);
    EXPECT_NE(r.err.find("fault_injection"), std::string::npos) << r.err;
}

TEST(RunConfigTest, JsonRoundTripAndStrictness) {
    RunConfig c;
    c.seed = 17;
    c.model.stages = 2;
    c.inference.median_kernel = 3;
    const auto back = run_config_from_json(run_config_to_json(c));
    EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
    EXPECT_THROW(run_config_from_json(R"({"inference": {"median_kernel": 2}})"), ConfigError);
    EXPECT_THROW(run_config_from_json(R"({"extra": 1})"), ConfigError);
    EXPECT_THROW(inference_config_from_json(R"({"peak": 0.5})"), ConfigError);
}

}  // namespace
}  // namespace prvql::cli
