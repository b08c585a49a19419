#include "prvql/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "prvql/core/checkpoint.hpp"

namespace prvql {

using nlohmann::json;

std::vector<std::int64_t> AnchorTargets::positives(std::int64_t frame) const {
    std::vector<std::int64_t> out;
    for (std::int64_t a = 0; a < anchors; ++a)
        if (label(frame, a) == AnchorLabel::kPositive) out.push_back(a);
    return out;
}

std::vector<std::int64_t> AnchorTargets::negatives(std::int64_t frame) const {
    std::vector<std::int64_t> out;
    for (std::int64_t a = 0; a < anchors; ++a)
        if (label(frame, a) == AnchorLabel::kNegative) out.push_back(a);
    return out;
}

std::int64_t AnchorTargets::positive_count() const {
    return std::count(labels.begin(), labels.end(), AnchorLabel::kPositive);
}

AnchorTargets assign_targets(const std::vector<Box>& anchors, const std::vector<std::optional<Box>>& gt,
                             const TargetConfig& config) {
    if (!(config.negative_iou <= config.positive_iou)) throw ConfigError("negative IoU threshold above positive");
    AnchorTargets t;
    t.frames = static_cast<std::int64_t>(gt.size());
    t.anchors = static_cast<std::int64_t>(anchors.size());
    t.labels.assign(static_cast<std::size_t>(t.frames * t.anchors), AnchorLabel::kNegative);
    t.gt = gt;
    for (std::int64_t f = 0; f < t.frames; ++f) {
        const auto& box = gt[static_cast<std::size_t>(f)];
        if (!box) continue;
        std::int64_t best = 0;
        double best_iou = -1;
        for (std::int64_t a = 0; a < t.anchors; ++a) {
            const double v = iou(anchors[static_cast<std::size_t>(a)], *box);
            auto& label = t.labels[static_cast<std::size_t>(f * t.anchors + a)];
            if (v >= config.positive_iou) label = AnchorLabel::kPositive;
            else if (v >= config.negative_iou) label = AnchorLabel::kIgnore;
            if (v > best_iou) best_iou = v, best = a;
        }
        if (t.anchors > 0) t.labels[static_cast<std::size_t>(f * t.anchors + best)] = AnchorLabel::kPositive;
    }
    return t;
}

std::vector<std::vector<std::int64_t>> hard_negative_mining(const std::vector<double>& scores,
                                                            const AnchorTargets& targets,
                                                            const MiningConfig& config) {
    if (static_cast<std::int64_t>(scores.size()) != targets.frames * targets.anchors)
        throw DimensionError("hard_negative_mining: score count does not match targets");
    if (config.ratio < 0 || config.min_per_frame < 0) throw ConfigError("mining ratio and floor must be non-negative");
    std::vector<std::vector<std::int64_t>> mined(static_cast<std::size_t>(targets.frames));
    for (std::int64_t f = 0; f < targets.frames; ++f) {
        auto neg = targets.negatives(f);
        const auto npos = static_cast<double>(targets.positives(f).size());
        const auto keep = std::min<std::int64_t>(
            static_cast<std::int64_t>(neg.size()),
            std::max(config.min_per_frame, static_cast<std::int64_t>(std::ceil(config.ratio * npos))));
        const double* s = scores.data() + f * targets.anchors;
        std::stable_sort(neg.begin(), neg.end(), [s](std::int64_t a, std::int64_t b) { return s[a] > s[b]; });
        neg.resize(static_cast<std::size_t>(keep));
        mined[static_cast<std::size_t>(f)] = std::move(neg);
    }
    return mined;
}

Tensor giou_tensor(const Tensor& pred, const Tensor& target) {
    if (pred.dim() != 2 || pred.size(1) != 4 || pred.shape() != target.shape())
        throw DimensionError("giou_tensor: expected matching [P, 4] boxes, got " + shape_str(pred.shape()) + " and " +
                             shape_str(target.shape()));
    auto col = [](const Tensor& x, std::int64_t i) { return ops::slice(x, 1, i, i + 1); };
    const Tensor px1 = col(pred, 0), py1 = col(pred, 1), px2 = col(pred, 2), py2 = col(pred, 3);
    const Tensor tx1 = col(target, 0), ty1 = col(target, 1), tx2 = col(target, 2), ty2 = col(target, 3);
    const Tensor iw = ops::relu(ops::sub(ops::minimum(px2, tx2), ops::maximum(px1, tx1)));
    const Tensor ih = ops::relu(ops::sub(ops::minimum(py2, ty2), ops::maximum(py1, ty1)));
    const Tensor inter = ops::mul(iw, ih);
    const Tensor area_p = ops::mul(ops::sub(px2, px1), ops::sub(py2, py1));
    const Tensor area_t = ops::mul(ops::sub(tx2, tx1), ops::sub(ty2, ty1));
    const Tensor uni = ops::sub(ops::add(area_p, area_t), inter);
    const Tensor enclose = ops::mul(ops::sub(ops::maximum(px2, tx2), ops::minimum(px1, tx1)),
                                    ops::sub(ops::maximum(py2, ty2), ops::minimum(py1, ty1)));
    const Tensor giou = ops::sub(ops::div(inter, uni), ops::div(ops::sub(enclose, uni), enclose));
    return ops::reshape(giou, {pred.size(0)});
}

namespace {

double checked(const Tensor& term, const char* name, std::int64_t stage) {
    const double v = term.item();
    if (!std::isfinite(v))
        throw NumericError("non-finite " + std::string(name) + " loss at stage " + std::to_string(stage + 1));
    return v;
}

}  // namespace

StageLoss stage_loss(const HeadOutput& heads, const AnchorTargets& targets, const LossConfig& config,
                     std::int64_t stage) {
    const auto L = heads.scores.size(0), N = heads.scores.size(1);
    if (L != targets.frames || N != targets.anchors)
        throw DimensionError("stage_loss: head output " + shape_str(heads.scores.shape()) + " does not match targets");
    const DType dtype = heads.scores.dtype();
    StageLoss out;
    out.total = Tensor::scalar(0.0, dtype);

    std::vector<std::int64_t> pos_index;
    std::vector<double> pos_boxes;
    for (std::int64_t f = 0; f < L; ++f)
        for (auto a : targets.positives(f)) {
            pos_index.push_back(f * N + a);
            for (double v : targets.gt[static_cast<std::size_t>(f)]->as_array()) pos_boxes.push_back(v);
        }
    out.positives = static_cast<std::int64_t>(pos_index.size());

    if (out.positives > 0) {
        const auto P = out.positives;
        const Tensor pred = ops::index_select(ops::reshape(heads.boxes, {L * N, 4}), 0, pos_index);
        const Tensor gt = Tensor::from_values({P, 4}, pos_boxes, dtype);
        const Tensor l1 = ops::scale(ops::sum(ops::abs(ops::sub(pred, gt))),
                                     1.0 / (config.frame_side * static_cast<double>(P)));
        const Tensor giou = ops::add_scalar(ops::neg(ops::mean(giou_tensor(pred, gt))), 1.0);
        out.l1 = checked(l1, "L1", stage);
        out.giou = checked(giou, "GIoU", stage);
        out.total = ops::add(l1, ops::scale(giou, config.lambda_giou));
    }

    const auto mined = hard_negative_mining(heads.scores.to_vector(), targets, config.mining);
    std::vector<std::int64_t> cls_index = pos_index;
    std::vector<double> cls_target(pos_index.size(), 1.0);
    for (std::int64_t f = 0; f < L; ++f)
        for (auto a : mined[static_cast<std::size_t>(f)]) {
            cls_index.push_back(f * N + a);
            cls_target.push_back(0.0);
        }
    out.mined = static_cast<std::int64_t>(cls_index.size()) - out.positives;
    if (!cls_index.empty()) {
        const auto M = static_cast<std::int64_t>(cls_index.size());
        const Tensor probs = ops::index_select(ops::reshape(heads.scores, {L * N}), 0, cls_index);
        const Tensor bce = ops::mean(ops::binary_cross_entropy(probs, Tensor::from_values({M}, cls_target, dtype)));
        out.bce = checked(bce, "BCE", stage);
        out.total = ops::add(out.total, ops::scale(bce, config.lambda_bce));
    }
    checked(out.total, "total", stage);
    return out;
}

TotalLoss total_loss(const ForwardResult& result, const AnchorTargets& targets, const LossConfig& config) {
    if (result.stages.empty()) throw ContractError("total_loss: forward result has no stages");
    TotalLoss out;
    for (std::size_t k = 0; k < result.stages.size(); ++k) {
        out.stages.push_back(stage_loss(result.stages[k].heads, targets, config, static_cast<std::int64_t>(k)));
        out.total = k == 0 ? out.stages.back().total : ops::add(out.total, out.stages.back().total);
    }
    return out;
}

AdamW::AdamW(std::vector<Parameter> params, const AdamWConfig& config)
    : params_(std::move(params)), config_(config) {
    if (config.lr < 0 || config.weight_decay < 0) throw ConfigError("learning rate and weight decay must be >= 0");
    if (!(config.beta1 >= 0 && config.beta1 < 1 && config.beta2 >= 0 && config.beta2 < 1))
        throw ConfigError("AdamW betas must lie in [0, 1)");
    if (!(config.eps > 0)) throw ConfigError("AdamW eps must be positive");
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor w = params_[i].tensor;
        const Tensor g = w.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        visit_dtype(w.dtype(), [&]<typename T>() {
            T* wp = w.mutable_data<T>();
            const T* gp = g.data<T>();
            for (std::size_t j = 0; j < m.size(); ++j) {
                const double gj = static_cast<double>(gp[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
                wp[j] = static_cast<T>(static_cast<double>(wp[j]) * decay - update);
            }
        });
    }
}

std::vector<std::int64_t> sample_clip(const QueryVideoPair& pair, std::int64_t length, Rng& rng) {
    const auto total = pair.length();
    if (length < 1) throw ConfigError("clip length must be >= 1");
    const auto track = extract_response_track(pair.gt);
    std::vector<std::int64_t> all(static_cast<std::size_t>(total));
    std::iota(all.begin(), all.end(), 0);
    if (length >= total) return all;
    auto draw = [&] {
        auto pool = all;
        for (std::int64_t i = 0; i < length; ++i)
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(rng.uniform_int(i, total - 1))]);
        pool.resize(static_cast<std::size_t>(length));
        return pool;
    };
    auto covers = [&](const std::vector<std::int64_t>& c) {
        return std::any_of(c.begin(), c.end(), [&](std::int64_t f) { return track.contains(f); });
    };
    std::vector<std::int64_t> clip = draw();
    for (int retry = 0; retry < 32 && !covers(clip); ++retry) clip = draw();
    if (!covers(clip))
        clip[static_cast<std::size_t>(rng.uniform_int(0, length - 1))] = rng.uniform_int(track.start, track.end);
    std::sort(clip.begin(), clip.end());
    return clip;
}

namespace {

template <class T>
T typed(const json& value, const std::string& key) {
    bool ok = false;
    if constexpr (std::is_unsigned_v<T>) ok = value.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) ok = value.is_number_integer() && value <= json(INT64_MAX);
    else ok = value.is_number();
    if (!ok) throw ConfigError("train config: wrong type for '" + key + "'");
    return value.get<T>();
}

std::string fmt_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

void validate(const TrainConfig& c) {
    if (c.iterations < 0) throw ConfigError("iterations must be >= 0");
    if (c.clip_length < 1) throw ConfigError("clip_length must be >= 1");
    if (c.batch < 1) throw ConfigError("batch must be >= 1");
    if (c.warmup < 0) throw ConfigError("warmup must be >= 0");
    if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (c.optim.lr < 0) throw ConfigError("lr must be >= 0");
    if (c.optim.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (c.loss.lambda_giou < 0 || c.loss.lambda_bce < 0) throw ConfigError("loss weights must be >= 0");
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) {
    json doc = {{"iterations", c.iterations},
                {"clip_length", c.clip_length},
                {"batch", c.batch},
                {"warmup", c.warmup},
                {"lr", c.optim.lr},
                {"weight_decay", c.optim.weight_decay},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"lambda_giou", c.loss.lambda_giou},
                {"lambda_bce", c.loss.lambda_bce},
                {"positive_iou", c.loss.targets.positive_iou},
                {"negative_iou", c.loss.targets.negative_iou},
                {"mining_ratio", c.loss.mining.ratio},
                {"mining_min", c.loss.mining.min_per_frame},
                {"checkpoint_every", c.checkpoint_every}};
    return doc.dump(2);
}

TrainConfig train_config_from_json(const std::string& text, const TrainConfig& base) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("train config must be a JSON object");
    TrainConfig c = base;
    using Setter = std::function<void(const json&)>;
    const std::map<std::string, Setter> setters = {
        {"iterations", [&](const json& v) { c.iterations = typed<std::int64_t>(v, "iterations"); }},
        {"clip_length", [&](const json& v) { c.clip_length = typed<std::int64_t>(v, "clip_length"); }},
        {"batch", [&](const json& v) { c.batch = typed<std::int64_t>(v, "batch"); }},
        {"warmup", [&](const json& v) { c.warmup = typed<std::int64_t>(v, "warmup"); }},
        {"lr", [&](const json& v) { c.optim.lr = typed<double>(v, "lr"); }},
        {"weight_decay", [&](const json& v) { c.optim.weight_decay = typed<double>(v, "weight_decay"); }},
        {"beta1", [&](const json& v) { c.optim.beta1 = typed<double>(v, "beta1"); }},
        {"beta2", [&](const json& v) { c.optim.beta2 = typed<double>(v, "beta2"); }},
        {"eps", [&](const json& v) { c.optim.eps = typed<double>(v, "eps"); }},
        {"lambda_giou", [&](const json& v) { c.loss.lambda_giou = typed<double>(v, "lambda_giou"); }},
        {"lambda_bce", [&](const json& v) { c.loss.lambda_bce = typed<double>(v, "lambda_bce"); }},
        {"positive_iou", [&](const json& v) { c.loss.targets.positive_iou = typed<double>(v, "positive_iou"); }},
        {"negative_iou", [&](const json& v) { c.loss.targets.negative_iou = typed<double>(v, "negative_iou"); }},
        {"mining_ratio", [&](const json& v) { c.loss.mining.ratio = typed<double>(v, "mining_ratio"); }},
        {"mining_min", [&](const json& v) { c.loss.mining.min_per_frame = typed<std::int64_t>(v, "mining_min"); }},
        {"checkpoint_every", [&](const json& v) { c.checkpoint_every = typed<std::int64_t>(v, "checkpoint_every"); }},
    };
    for (const auto& [key, value] : doc.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("train config: unknown key '" + key + "'");
        it->second(value);
    }
    validate(c);
    return c;
}

TrainResult train(PrvqlModel& model, const std::vector<QueryVideoPair>& dataset, const TrainConfig& config,
                  const TrainCallback& on_iteration) {
    validate(config);
    if (dataset.empty()) throw ContractError("train: empty dataset");
    const auto K = model.config().stages;
    LossConfig loss_config = config.loss;
    loss_config.frame_side = static_cast<double>(model.config().frame_side);

    std::ofstream log;
    if (!config.log_path.empty()) {
        log.open(config.log_path, std::ios::trunc);
        if (!log) throw IoError("cannot open " + config.log_path.string() + " for writing");
        log << "iter";
        for (std::int64_t k = 1; k <= K; ++k) log << ",stage_" << k;
        log << ",total\n";
    }
    if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);

    Rng root(config.seed);
    Rng order_rng = root.fork(1), clip_rng = root.fork(2);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    auto next_pair = [&]() -> const QueryVideoPair& {
        if (cursor == order.size()) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            cursor = 0;
        }
        return dataset[order[cursor++]];
    };

    AdamW optim(model.parameters(), config.optim);
    TrainResult result;
    auto save = [&](const std::string& name) {
        const auto path = config.checkpoint_dir / name;
        save_checkpoint(path, model.parameters());
        result.checkpoints.push_back(path);
    };

    for (std::int64_t it = 1; it <= config.iterations; ++it) {
        model.store().zero_grad();
        IterationLog entry{it, std::vector<double>(static_cast<std::size_t>(K), 0.0), 0.0};
        for (std::int64_t b = 0; b < config.batch; ++b) {
            const auto& pair = next_pair();
            const auto clip = sample_clip(pair, config.clip_length, clip_rng);
            std::vector<std::optional<Box>> gt;
            for (auto f : clip) gt.push_back(pair.gt.boxes[static_cast<std::size_t>(f)]);
            const auto forward = model.forward(image_to_tensor(pair.query), frames_to_tensor(pair.frames, clip));
            const auto targets = assign_targets(model.anchors(), gt, loss_config.targets);
            TotalLoss loss;
            try {
                loss = total_loss(forward, targets, loss_config);
            } catch (const NumericError& e) {
                throw NumericError("iteration " + std::to_string(it) + " (" + pair.pair_id + "): " + e.what());
            }
            backward(ops::scale(loss.total, 1.0 / static_cast<double>(config.batch)));
            for (std::int64_t k = 0; k < K; ++k)
                entry.stage_losses[static_cast<std::size_t>(k)] +=
                    loss.stages[static_cast<std::size_t>(k)].total.item() / static_cast<double>(config.batch);
        }
        for (double v : entry.stage_losses) entry.total += v;
        const double lr = config.warmup > 0
                              ? config.optim.lr * std::min(1.0, static_cast<double>(it) / static_cast<double>(config.warmup))
                              : config.optim.lr;
        optim.step(lr);

        if (log.is_open()) {
            log << it;
            for (double v : entry.stage_losses) log << ',' << fmt_double(v);
            log << ',' << fmt_double(entry.total) << '\n' << std::flush;
            if (!log) throw IoError("write failed: " + config.log_path.string());
        }
        result.log.push_back(entry);
        if (on_iteration) on_iteration(entry);
        if (!config.checkpoint_dir.empty() && config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(it));
            save(name);
        }
    }
    if (!config.checkpoint_dir.empty()) save("final.ckpt");
    return result;
}

}  // namespace prvql
