#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prvql/image.hpp"
#include "prvql/track.hpp"

namespace prvql {

enum class VisibilityPattern { kAlways, kEnter, kExit, kEnterExit, kGap, kRandom };

const char* visibility_name(VisibilityPattern pattern);
VisibilityPattern parse_visibility(const std::string& name);

struct SceneConfig {
    std::int64_t canvas = 96;
    std::int64_t query_side = 96;
    std::int64_t min_distractors = 2;
    std::int64_t max_distractors = 4;
    // Target radius in pixels; the tight box side is roughly twice this.
    double min_radius = 5.0;
    double max_radius = 8.0;
    double distractor_similarity = 0.3;
    double motion_sigma = 1.5;  // px per frame
    double shake_sigma = 0.75;  // px per frame
    double max_rotation_deg = 30.0;
    double query_min_rotation_deg = 40.0;
    double query_max_rotation_deg = 80.0;
    double occlusion_prob = 0.15;
    double blur_prob = 0.15;
    double noise_sigma = 4.0;
    double min_visible_fraction = 0.3;
    VisibilityPattern visibility = VisibilityPattern::kRandom;

    void validate() const;
};

std::string scene_config_to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const std::string& text, const SceneConfig& base = {});

// Appearance of one object instance.
struct ShapeSpec {
    bool ellipse = false;
    std::int64_t sides = 5;
    std::array<double, 8> radii{};  // per-vertex radius multipliers for polygons
    double aspect = 1.0;            // minor/major axis ratio for ellipses
    std::array<std::uint8_t, 3> color{}, accent{};
    std::int64_t texture = 0;  // 0 solid, 1 stripes, 2 checker
    double texture_freq = 0.5;
};

struct Placement {
    double cx = 0, cy = 0, radius = 1, angle = 0;  // angle in radians
};

// Whether pixel-space point (x, y) lies inside the placed shape.
bool shape_contains(const ShapeSpec& shape, const Placement& placement, double x, double y);
// Exact geometric extent of the placed shape, without rasterization.
Box shape_extent(const ShapeSpec& shape, const Placement& placement);

// Scene-graph record for one frame, kept for verification.
struct FrameScene {
    Placement target;
    bool target_present = true;
    bool occluded = false;
    Box occluder;
    double visible_fraction = 1.0;
};

struct QueryVideoPair {
    std::string pair_id;
    std::uint64_t seed = 0;
    SceneConfig config;
    Image query;
    std::vector<Image> frames;
    GroundTruth gt;
    // Not persisted: generator internals for oracle checks.
    ShapeSpec target_shape;
    std::vector<FrameScene> scenes;

    std::int64_t length() const { return static_cast<std::int64_t>(frames.size()); }
};

QueryVideoPair generate_pair(std::uint64_t seed, const SceneConfig& config, std::int64_t frames,
                             const std::string& pair_id = "pair");

// Seed of the i-th pair of a dataset generated with `seed`.
std::uint64_t pair_seed(std::uint64_t seed, std::int64_t index);
std::vector<QueryVideoPair> generate_dataset(std::uint64_t seed, const SceneConfig& config, std::int64_t pairs,
                                             std::int64_t frames, const std::string& prefix = "pair");

// <root>/<pair_id>/{query.ppm, frame_%04d.ppm, annotation.json} plus
// <root>/manifest.json listing the pair ids.
void save_pair(const std::filesystem::path& root, const QueryVideoPair& pair);
QueryVideoPair load_pair(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& root, const std::vector<QueryVideoPair>& pairs);
std::vector<QueryVideoPair> load_dataset(const std::filesystem::path& root);

struct DatasetStats {
    std::int64_t pairs = 0, frames = 0, visible_frames = 0;
    double min_scale = 0, mean_scale = 0, max_scale = 0;  // sqrt(box area) in pixels
    // Frame counts with sqrt(area) < 1/8, < 1/6 and >= 1/6 of the canvas side.
    std::int64_t small = 0, medium = 0, large = 0;
};

DatasetStats dataset_stats(const std::vector<QueryVideoPair>& pairs);

}  // namespace prvql
