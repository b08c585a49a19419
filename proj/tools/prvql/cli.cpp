#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "prvql/core/checkpoint.hpp"
#include "prvql/grad_blocks.hpp"

namespace prvql::cli {

using nlohmann::json;

namespace {

json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(what + ": " + e.what());
    }
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

class UsageError : public Error {
   public:
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};

}  // namespace

std::string inference_config_to_json(const InferenceConfig& c) {
    return json{{"peak_ratio", c.peak_ratio}, {"extend_ratio", c.extend_ratio}, {"median_kernel", c.median_kernel}}
        .dump(2);
}

InferenceConfig inference_config_from_json(const std::string& text, const InferenceConfig& base) {
    const json doc = parse_json(text, "inference config");
    if (!doc.is_object()) throw ConfigError("inference config must be a JSON object");
    InferenceConfig c = base;
    for (const auto& [key, v] : doc.items()) {
        if (key == "median_kernel") {
            if (!v.is_number_integer()) throw ConfigError("inference config: wrong type for 'median_kernel'");
            c.median_kernel = v.get<std::int64_t>();
        } else if (key == "peak_ratio" || key == "extend_ratio") {
            if (!v.is_number()) throw ConfigError("inference config: wrong type for '" + key + "'");
            (key == "peak_ratio" ? c.peak_ratio : c.extend_ratio) = v.get<double>();
        } else {
            throw ConfigError("inference config: unknown key '" + key + "'");
        }
    }
    if (c.median_kernel < 1 || c.median_kernel % 2 == 0) throw ConfigError("median_kernel must be odd and >= 1");
    if (!(c.peak_ratio > 0 && c.peak_ratio <= 1) || !(c.extend_ratio > 0 && c.extend_ratio <= 1))
        throw ConfigError("inference ratios must lie in (0, 1]");
    return c;
}

RunConfig run_config_from_json(const std::string& text, const RunConfig& base) {
    const json doc = parse_json(text, "run config");
    if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig c = base;
    for (const auto& [key, v] : doc.items()) {
        if (key == "seed") {
            if (!v.is_number_unsigned()) throw ConfigError("run config: 'seed' must be a non-negative integer");
            c.seed = v.get<std::uint64_t>();
        } else if (key == "model") {
            c.model = model_config_from_json(v.dump(), c.model);
        } else if (key == "train") {
            c.train = train_config_from_json(v.dump(), c.train);
        } else if (key == "scene") {
            c.scene = scene_config_from_json(v.dump(), c.scene);
        } else if (key == "inference") {
            c.inference = inference_config_from_json(v.dump(), c.inference);
        } else {
            throw ConfigError("run config: unknown key '" + key + "'");
        }
    }
    return c;
}

std::string run_config_to_json(const RunConfig& c) {
    json doc = {{"seed", c.seed},
                {"model", json::parse(model_config_to_json(c.model))},
                {"train", json::parse(train_config_to_json(c.train))},
                {"scene", json::parse(scene_config_to_json(c.scene))},
                {"inference", json::parse(inference_config_to_json(c.inference))}};
    return doc.dump(2);
}

namespace {

// Flags that mirror config fields. Each is applied only when given.
struct Overrides {
    std::vector<std::function<void(RunConfig&)>> apply;

    template <class T, class Setter>
    void add(CLI::App* app, const std::string& flag, const std::string& help, Setter setter) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app->add_option(flag, *value, help);
        apply.push_back([opt, value, setter](RunConfig& c) {
            if (opt->count()) setter(c, *value);
        });
    }
    void flag(CLI::App* app, const std::string& flag, const std::string& help, std::function<void(RunConfig&)> setter) {
        CLI::Option* opt = app->add_flag(flag, help);
        apply.push_back([opt, setter](RunConfig& c) {
            if (opt->count()) setter(c);
        });
    }
};

void add_model_flags(CLI::App* app, Overrides& o) {
    o.add<std::int64_t>(app, "--stages", "number of refinement stages K",
                        [](RunConfig& c, std::int64_t v) { c.model.stages = v; });
    o.add<double>(app, "--tau", "appearance knowledge score threshold", [](RunConfig& c, double v) { c.model.tau = v; });
    o.add<std::int64_t>(app, "--top-n", "appearance knowledge frames per stage",
                        [](RunConfig& c, std::int64_t v) { c.model.top_n = v; });
    o.add<double>(app, "--alpha", "spatial knowledge blend weight", [](RunConfig& c, double v) { c.model.alpha = v; });
    o.add<double>(app, "--beta", "video refinement strength", [](RunConfig& c, double v) { c.model.beta = v; });
    o.add<std::string>(app, "--qfr-mode", "cross-attention | addition | concatenation",
                       [](RunConfig& c, const std::string& v) { c.model.qfr_mode = parse_qfr_mode(v); });
    o.add<std::int64_t>(app, "--window", "temporal attention radius u",
                        [](RunConfig& c, std::int64_t v) { c.model.window = v; });
    o.flag(app, "--tie-weights", "share stage blocks across stages", [](RunConfig& c) { c.model.tie_weights = true; });
    o.flag(app, "--no-akg", "disable appearance knowledge", [](RunConfig& c) { c.model.akg_enabled = false; });
    o.flag(app, "--no-skg", "disable spatial knowledge", [](RunConfig& c) { c.model.skg_enabled = false; });
}

void add_inference_flags(CLI::App* app, Overrides& o) {
    o.add<double>(app, "--peak-ratio", "peak filter ratio", [](RunConfig& c, double v) { c.inference.peak_ratio = v; });
    o.add<double>(app, "--extend-ratio", "track extension ratio",
                  [](RunConfig& c, double v) { c.inference.extend_ratio = v; });
    o.add<std::int64_t>(app, "--median-kernel", "median filter size",
                        [](RunConfig& c, std::int64_t v) { c.inference.median_kernel = v; });
}

struct Common {
    std::string config_path;
    std::string out;
    Overrides overrides;
};

void add_common(CLI::App* app, Common& common, bool out_required) {
    app->add_option("--config", common.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    common.overrides.add<std::uint64_t>(app, "--seed", "random seed", [](RunConfig& c, std::uint64_t v) { c.seed = v; });
    auto* out = app->add_option("--out", common.out, "output location");
    if (out_required) out->required();
}

RunConfig resolve(const Common& common) {
    RunConfig c;
    if (!common.config_path.empty()) c = run_config_from_json(read_text(common.config_path), c);
    for (const auto& apply : common.overrides.apply) apply(c);
    c.train.seed = c.seed;
    c.model.validate();
    c.scene.validate();
    inference_config_from_json(inference_config_to_json(c.inference));
    train_config_from_json(train_config_to_json(c.train));
    return c;
}

void echo(std::ostream& out, const RunConfig& c) { out << "config " << json::parse(run_config_to_json(c)).dump() << '\n'; }

int cmd_gen_data(const Common& common, std::int64_t pairs, std::int64_t frames, const std::string& prefix,
                 std::ostream& out) {
    if (pairs < 1) throw UsageError("--pairs must be >= 1");
    if (frames < 1) throw UsageError("--frames must be >= 1");
    const RunConfig c = resolve(common);
    echo(out, c);
    const auto dataset = generate_dataset(c.seed, c.scene, pairs, frames, prefix);
    save_dataset(common.out, dataset);
    const auto stats = dataset_stats(dataset);
    out << "wrote " << stats.pairs << " pairs (" << stats.frames << " frames, " << stats.visible_frames
        << " visible; small " << stats.small << ", medium " << stats.medium << ", large " << stats.large << ") to "
        << common.out << '\n';
    return 0;
}

int cmd_train(const Common& common, const std::string& data, std::int64_t log_every, std::ostream& out) {
    RunConfig c = resolve(common);
    const std::filesystem::path dir = common.out;
    std::filesystem::create_directories(dir);
    c.train.log_path = dir / "loss.csv";
    c.train.checkpoint_dir = dir / "checkpoints";
    echo(out, c);
    write_text(dir / "config.json", run_config_to_json(c));
    const auto dataset = load_dataset(data);
    PrvqlModel model(c.model, c.seed);
    out << "training " << model.store().total_elements() << " parameters on " << dataset.size() << " pairs\n";
    const auto start = std::chrono::steady_clock::now();
    const auto result = train(model, dataset, c.train, [&](const IterationLog& e) {
        if (log_every > 0 && (e.iteration == 1 || e.iteration % log_every == 0)) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            out << "iter " << e.iteration << " loss " << e.total << " (" << s << " s)\n" << std::flush;
        }
    });
    out << "checkpoint " << result.checkpoints.back().string() << '\n';
    return 0;
}

void dump_saliency(const std::filesystem::path& root, const QueryVideoPair& pair, const ForwardResult& result,
                   const ModelConfig& mc) {
    const auto side = mc.frame_side, grid = mc.grid();
    for (std::size_t k = 0; k < result.stages.size(); ++k) {
        const auto& spatial = result.stages[k].spatial;
        if (!spatial) continue;
        const auto dir = root / pair.pair_id;
        std::filesystem::create_directories(dir);
        const auto sal = spatial->saliency.to_vector();
        for (std::int64_t f = 0; f < pair.length(); ++f) {
            std::vector<double> up(static_cast<std::size_t>(side * side));
            for (std::int64_t y = 0; y < side; ++y)
                for (std::int64_t x = 0; x < side; ++x)
                    up[static_cast<std::size_t>(y * side + x)] =
                        sal[static_cast<std::size_t>(f * grid * grid + (y * grid / side) * grid + x * grid / side)];
            char name[64];
            std::snprintf(name, sizeof name, "stage%zu_frame_%04lld.pgm", k + 1, static_cast<long long>(f));
            write_pgm(dir / name, grayscale_from_unit(up, side, side));
        }
    }
}

json knowledge_record(const std::string& pair_id, std::size_t stage, const AppearanceKnowledge& k) {
    json boxes = json::array();
    for (const auto& b : k.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    return {{"pair_id", pair_id}, {"stage", stage + 1}, {"frames", k.frames}, {"scores", k.scores}, {"boxes", boxes}};
}

int cmd_infer(const Common& common, const std::string& data, const std::string& checkpoint, bool saliency,
              bool knowledge, std::ostream& out) {
    const RunConfig c = resolve(common);
    echo(out, c);
    if (!std::filesystem::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    PrvqlModel model(c.model, c.seed);
    load_checkpoint(checkpoint, model.parameters());
    const auto dataset = load_dataset(data);
    const std::filesystem::path dir = common.out;
    std::filesystem::create_directories(dir);
    std::ofstream kfile;
    if (knowledge) {
        kfile.open(dir / "knowledge.jsonl", std::ios::trunc);
        if (!kfile) throw IoError("cannot open " + (dir / "knowledge.jsonl").string());
    }
    std::vector<Prediction> predictions;
    for (const auto& pair : dataset) {
        NoGradGuard no_grad;
        std::vector<std::int64_t> all(static_cast<std::size_t>(pair.length()));
        for (std::int64_t i = 0; i < pair.length(); ++i) all[static_cast<std::size_t>(i)] = i;
        const auto result = model.forward(image_to_tensor(pair.query), frames_to_tensor(pair.frames, all));
        std::vector<double> scores;
        std::vector<Box> boxes;
        for (const auto& b : per_frame_best(result.final_heads().scores, result.final_heads().boxes)) {
            scores.push_back(b.score);
            boxes.push_back(b.box);
        }
        predictions.push_back({pair.pair_id, infer_track(scores, boxes, c.inference)});
        if (saliency) dump_saliency(dir / "saliency", pair, result, c.model);
        if (knowledge)
            for (std::size_t k = 0; k < result.stages.size(); ++k)
                if (result.stages[k].appearance)
                    kfile << knowledge_record(pair.pair_id, k, *result.stages[k].appearance).dump() << '\n';
    }
    write_predictions(dir / "predictions.jsonl", predictions);
    out << "wrote " << predictions.size() << " predictions to " << (dir / "predictions.jsonl").string() << '\n';
    return 0;
}

int cmd_eval(const Common& common, const std::string& data, const std::string& predictions_path, std::ostream& out) {
    const RunConfig c = resolve(common);
    echo(out, c);
    const auto gts = ground_truth_tracks(load_dataset(data));
    const auto report = evaluate(read_predictions(predictions_path), gts);
    const auto text = report_to_json(report);
    if (!common.out.empty()) write_text(common.out, text + "\n");
    out << "tAP25 " << report.tap25 << " stAP25 " << report.stap25 << " rec% " << report.recovery << " Succ "
        << report.success << '\n';
    return 0;
}

int cmd_gradcheck(const Common& common, const std::vector<std::string>& only, bool inject_fault,
                  std::int64_t max_entries, std::ostream& out) {
    const RunConfig c = resolve(common);
    echo(out, c);
    auto blocks = gradient_check_blocks();
    for (const auto& name : only)
        if (std::none_of(blocks.begin(), blocks.end(), [&](const GradBlock& b) { return b.name == name; }))
            throw UsageError("unknown block '" + name + "'");
    if (!only.empty())
        std::erase_if(blocks, [&](const GradBlock& b) { return std::find(only.begin(), only.end(), b.name) == only.end(); });
    if (inject_fault) blocks.push_back(faulty_gradient_block());
    std::vector<std::string> failed;
    for (const auto& b : blocks) {
        GradCheckOptions options;
        options.tol = b.tol;
        options.max_entries = max_entries;
        const auto report = b.run(options, c.seed);
        std::int64_t checked = 0;
        for (const auto& e : report.entries) checked += e.checked;
        out << "block " << b.name << " entries " << checked << " max_rel_error " << report.max_rel_error << " tol "
            << b.tol << (report.passed ? " PASS" : " FAIL") << '\n';
        if (!report.passed) failed.push_back(b.name);
    }
    out << "gradcheck " << blocks.size() - failed.size() << "/" << blocks.size() << " blocks passed\n";
    if (!failed.empty()) {
        std::string names;
        for (const auto& f : failed) names += (names.empty() ? "" : ",") + f;
        throw ContractError("gradient check failed for " + names);
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Progressive knowledge-guided visual query localization"};
    app.name("prvql");
    app.require_subcommand(1);

    Common gen_common, train_common, infer_common, eval_common, grad_common;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    add_common(gen, gen_common, true);
    std::int64_t pairs = 0, frames = 16;
    std::string prefix = "pair";
    gen->add_option("--pairs", pairs, "number of query/video pairs")->required();
    gen->add_option("--frames", frames, "frames per video");
    gen->add_option("--prefix", prefix, "pair id prefix");
    gen_common.overrides.add<std::string>(gen, "--visibility", "always | enter | exit | enter-exit | gap | random",
                                          [](RunConfig& c, const std::string& v) { c.scene.visibility = parse_visibility(v); });
    gen_common.overrides.add<double>(gen, "--occlusion-prob", "per-frame occluder probability",
                                     [](RunConfig& c, double v) { c.scene.occlusion_prob = v; });
    gen_common.overrides.add<double>(gen, "--blur-prob", "per-frame motion blur probability",
                                     [](RunConfig& c, double v) { c.scene.blur_prob = v; });

    auto* tr = app.add_subcommand("train", "train a model");
    add_common(tr, train_common, true);
    std::string train_data;
    std::int64_t log_every = 50;
    tr->add_option("--data", train_data, "dataset directory")->required();
    tr->add_option("--log-every", log_every, "progress line interval (0 disables)");
    add_model_flags(tr, train_common.overrides);
    auto& to = train_common.overrides;
    to.add<std::int64_t>(tr, "--iterations", "optimizer steps", [](RunConfig& c, std::int64_t v) { c.train.iterations = v; });
    to.add<double>(tr, "--lr", "peak learning rate", [](RunConfig& c, double v) { c.train.optim.lr = v; });
    to.add<double>(tr, "--weight-decay", "decoupled weight decay",
                   [](RunConfig& c, double v) { c.train.optim.weight_decay = v; });
    to.add<std::int64_t>(tr, "--warmup", "linear warmup iterations", [](RunConfig& c, std::int64_t v) { c.train.warmup = v; });
    to.add<std::int64_t>(tr, "--batch", "pairs per update", [](RunConfig& c, std::int64_t v) { c.train.batch = v; });
    to.add<std::int64_t>(tr, "--clip-length", "frames per training clip",
                         [](RunConfig& c, std::int64_t v) { c.train.clip_length = v; });
    to.add<std::int64_t>(tr, "--checkpoint-every", "checkpoint interval (0: final only)",
                         [](RunConfig& c, std::int64_t v) { c.train.checkpoint_every = v; });

    auto* inf = app.add_subcommand("infer", "predict response tracks");
    add_common(inf, infer_common, true);
    std::string infer_data, checkpoint;
    bool dump_sal = false, dump_know = false;
    inf->add_option("--data", infer_data, "dataset directory")->required();
    inf->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    inf->add_flag("--dump-saliency", dump_sal, "write per-stage saliency maps as PGM images");
    inf->add_flag("--dump-knowledge", dump_know, "write selected appearance knowledge as JSON lines");
    add_model_flags(inf, infer_common.overrides);
    add_inference_flags(inf, infer_common.overrides);

    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    add_common(ev, eval_common, false);
    std::string eval_data, predictions;
    ev->add_option("--data", eval_data, "dataset directory")->required();
    ev->add_option("--predictions", predictions, "predictions JSON lines")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_common(gc, grad_common, false);
    std::vector<std::string> only;
    bool inject_fault = false;
    std::int64_t max_entries = 48;
    gc->add_option("--block", only, "restrict to these blocks");
    gc->add_flag("--inject-fault", inject_fault, "append a block with a wrong backward rule");
    gc->add_option("--max-entries", max_entries, "entries checked per parameter tensor");

    std::vector<std::string> argv_store{"prvql"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: usage: " << msg << '\n';
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_common, pairs, frames, prefix, out);
        if (tr->parsed()) return cmd_train(train_common, train_data, log_every, out);
        if (inf->parsed()) return cmd_infer(infer_common, infer_data, checkpoint, dump_sal, dump_know, out);
        if (ev->parsed()) return cmd_eval(eval_common, eval_data, predictions, out);
        return cmd_gradcheck(grad_common, only, inject_fault, max_entries, out);
    } catch (const UsageError& e) {
        err << "error: usage: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << e.code() << ": " << msg << '\n';
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: io: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace prvql::cli
