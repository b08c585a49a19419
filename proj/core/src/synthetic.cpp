#include "prvql/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "prvql/core/nn.hpp"

namespace prvql {

using nlohmann::json;

const char* visibility_name(VisibilityPattern pattern) {
    switch (pattern) {
        case VisibilityPattern::kAlways: return "always";
        case VisibilityPattern::kEnter: return "enter";
        case VisibilityPattern::kExit: return "exit";
        case VisibilityPattern::kEnterExit: return "enter-exit";
        case VisibilityPattern::kGap: return "gap";
        case VisibilityPattern::kRandom: return "random";
    }
    return "?";
}

VisibilityPattern parse_visibility(const std::string& name) {
    for (auto p : {VisibilityPattern::kAlways, VisibilityPattern::kEnter, VisibilityPattern::kExit,
                   VisibilityPattern::kEnterExit, VisibilityPattern::kGap, VisibilityPattern::kRandom})
        if (name == visibility_name(p)) return p;
    throw ConfigError("unknown visibility pattern '" + name + "'");
}

void SceneConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("scene config: " + what);
    };
    auto probability = [&](double p, const char* name) { require(p >= 0.0 && p <= 1.0, std::string(name) + " must lie in [0, 1]"); };
    require(canvas >= 32, "canvas must be >= 32");
    require(query_side >= 8, "query_side must be >= 8");
    require(min_distractors >= 0 && max_distractors >= min_distractors, "invalid distractor count range");
    require(min_radius > 0 && max_radius >= min_radius, "invalid radius range");
    require(2.0 * max_radius + 2.0 <= static_cast<double>(canvas), "target does not fit on the canvas");
    probability(distractor_similarity, "distractor_similarity");
    probability(occlusion_prob, "occlusion_prob");
    probability(blur_prob, "blur_prob");
    probability(min_visible_fraction, "min_visible_fraction");
    require(motion_sigma >= 0 && shake_sigma >= 0 && noise_sigma >= 0, "sigmas must be >= 0");
    require(max_rotation_deg >= 0 && query_min_rotation_deg > max_rotation_deg &&
                query_max_rotation_deg >= query_min_rotation_deg && query_max_rotation_deg <= 180,
            "query rotation range must lie strictly outside the video range");
}

std::string scene_config_to_json(const SceneConfig& c) {
    json doc = {
        {"canvas", c.canvas},
        {"query_side", c.query_side},
        {"min_distractors", c.min_distractors},
        {"max_distractors", c.max_distractors},
        {"min_radius", c.min_radius},
        {"max_radius", c.max_radius},
        {"distractor_similarity", c.distractor_similarity},
        {"motion_sigma", c.motion_sigma},
        {"shake_sigma", c.shake_sigma},
        {"max_rotation_deg", c.max_rotation_deg},
        {"query_min_rotation_deg", c.query_min_rotation_deg},
        {"query_max_rotation_deg", c.query_max_rotation_deg},
        {"occlusion_prob", c.occlusion_prob},
        {"blur_prob", c.blur_prob},
        {"noise_sigma", c.noise_sigma},
        {"min_visible_fraction", c.min_visible_fraction},
        {"visibility", visibility_name(c.visibility)},
    };
    return doc.dump();
}

namespace {

SceneConfig scene_config_from(const json& doc, const SceneConfig& base) {
    if (!doc.is_object()) throw ConfigError("scene config must be a JSON object");
    SceneConfig c = base;
    auto integer = [](const json& v, const std::string& key) {
        if (!v.is_number_integer()) throw ConfigError("scene config: '" + key + "' must be an integer");
        return v.get<std::int64_t>();
    };
    auto number = [](const json& v, const std::string& key) {
        if (!v.is_number()) throw ConfigError("scene config: '" + key + "' must be a number");
        return v.get<double>();
    };
    using Setter = std::function<void(const json&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        {"canvas", [&](const json& v, const std::string& k) { c.canvas = integer(v, k); }},
        {"query_side", [&](const json& v, const std::string& k) { c.query_side = integer(v, k); }},
        {"min_distractors", [&](const json& v, const std::string& k) { c.min_distractors = integer(v, k); }},
        {"max_distractors", [&](const json& v, const std::string& k) { c.max_distractors = integer(v, k); }},
        {"min_radius", [&](const json& v, const std::string& k) { c.min_radius = number(v, k); }},
        {"max_radius", [&](const json& v, const std::string& k) { c.max_radius = number(v, k); }},
        {"distractor_similarity", [&](const json& v, const std::string& k) { c.distractor_similarity = number(v, k); }},
        {"motion_sigma", [&](const json& v, const std::string& k) { c.motion_sigma = number(v, k); }},
        {"shake_sigma", [&](const json& v, const std::string& k) { c.shake_sigma = number(v, k); }},
        {"max_rotation_deg", [&](const json& v, const std::string& k) { c.max_rotation_deg = number(v, k); }},
        {"query_min_rotation_deg", [&](const json& v, const std::string& k) { c.query_min_rotation_deg = number(v, k); }},
        {"query_max_rotation_deg", [&](const json& v, const std::string& k) { c.query_max_rotation_deg = number(v, k); }},
        {"occlusion_prob", [&](const json& v, const std::string& k) { c.occlusion_prob = number(v, k); }},
        {"blur_prob", [&](const json& v, const std::string& k) { c.blur_prob = number(v, k); }},
        {"noise_sigma", [&](const json& v, const std::string& k) { c.noise_sigma = number(v, k); }},
        {"min_visible_fraction", [&](const json& v, const std::string& k) { c.min_visible_fraction = number(v, k); }},
        {"visibility",
         [&](const json& v, const std::string& k) {
             if (!v.is_string()) throw ConfigError("scene config: '" + k + "' must be a string");
             c.visibility = parse_visibility(v.get<std::string>());
         }},
    };
    for (const auto& [key, value] : doc.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("scene config: unknown key '" + key + "'");
        it->second(value, key);
    }
    c.validate();
    return c;
}

}  // namespace

SceneConfig scene_config_from_json(const std::string& text, const SceneConfig& base) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("scene config: ") + e.what());
    }
    return scene_config_from(doc, base);
}

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Object-local coordinates normalised by the radius.
std::pair<double, double> to_local(const Placement& p, double x, double y) {
    const double dx = x - p.cx, dy = y - p.cy;
    const double c = std::cos(p.angle), s = std::sin(p.angle);
    return {(c * dx + s * dy) / p.radius, (-s * dx + c * dy) / p.radius};
}

std::pair<double, double> polygon_vertex(const ShapeSpec& shape, std::int64_t k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(shape.sides);
    const double r = shape.radii[static_cast<std::size_t>(k)];
    return {r * std::cos(a), r * std::sin(a)};
}

std::array<std::uint8_t, 3> hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s, hp = h * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
    double r = 0, g = 0, b = 0;
    if (hp < 1) r = c, g = x;
    else if (hp < 2) r = x, g = c;
    else if (hp < 3) g = c, b = x;
    else if (hp < 4) g = x, b = c;
    else if (hp < 5) r = x, b = c;
    else r = c, b = x;
    const double m = v - c;
    auto q = [&](double u) { return static_cast<std::uint8_t>(std::lround(std::clamp(u + m, 0.0, 1.0) * 255.0)); };
    return {q(r), q(g), q(b)};
}

double hue_distance(double a, double b) {
    const double d = std::abs(a - b) - std::floor(std::abs(a - b));
    return std::min(d, 1.0 - d);
}

ShapeSpec random_shape(Rng& rng, double hue, bool ellipse, std::int64_t sides) {
    ShapeSpec s;
    s.ellipse = ellipse;
    s.sides = sides;
    for (auto& r : s.radii) r = rng.uniform(0.8, 1.0);
    s.aspect = rng.uniform(0.55, 0.9);
    const double sat = rng.uniform(0.75, 1.0), val = rng.uniform(0.8, 1.0);
    s.color = hsv(hue, sat, val);
    s.accent = hsv(hue + rng.uniform(-0.05, 0.05), sat * 0.45, val * 0.55);
    s.texture = rng.uniform_int(0, 2);
    s.texture_freq = static_cast<double>(rng.uniform_int(2, 3));
    return s;
}

std::array<std::uint8_t, 3> shape_color(const ShapeSpec& s, double lu, double lv) {
    const double k = s.texture_freq;
    const auto band_u = static_cast<std::int64_t>(std::floor((lu + 1.0) * k));
    const auto band_v = static_cast<std::int64_t>(std::floor((lv + 1.0) * k));
    bool accent = false;
    if (s.texture == 1) accent = (band_u & 1) != 0;
    if (s.texture == 2) accent = ((band_u + band_v) & 1) != 0;
    return accent ? s.accent : s.color;
}

// Draws the shape; marks covered pixels in `mask` when given. Returns the pixel count.
std::int64_t draw_shape(Image& img, const ShapeSpec& s, const Placement& p, std::vector<std::uint8_t>* mask) {
    const Box e = shape_extent(s, p);
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(e.x1)) - 1);
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(e.y1)) - 1);
    const auto x1 = std::min<std::int64_t>(img.width - 1, static_cast<std::int64_t>(std::ceil(e.x2)) + 1);
    const auto y1 = std::min<std::int64_t>(img.height - 1, static_cast<std::int64_t>(std::ceil(e.y2)) + 1);
    std::int64_t count = 0;
    for (std::int64_t y = y0; y <= y1; ++y)
        for (std::int64_t x = x0; x <= x1; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            if (!shape_contains(s, p, px, py)) continue;
            const auto [lu, lv] = to_local(p, px, py);
            const auto c = shape_color(s, lu, lv);
            std::copy(c.begin(), c.end(), img.at(x, y));
            if (mask) (*mask)[static_cast<std::size_t>(y * img.width + x)] = 1;
            ++count;
        }
    return count;
}

struct Background {
    std::array<double, 3> base{};
    std::array<double, 2> amp{}, fx{}, fy{}, phase{};
    std::array<double, 3> tint{};

    double value(std::int64_t channel, double x, double y) const {
        double v = base[static_cast<std::size_t>(channel)];
        for (std::size_t k = 0; k < 2; ++k)
            v += amp[k] * tint[static_cast<std::size_t>(channel)] * std::sin(fx[k] * x + fy[k] * y + phase[k]);
        return v;
    }
};

Background random_background(Rng& rng) {
    Background bg;
    const double grey = rng.uniform(70, 150);
    for (auto& b : bg.base) b = grey + rng.uniform(-20, 20);
    for (std::size_t k = 0; k < 2; ++k) {
        bg.amp[k] = rng.uniform(8, 22);
        const double f = rng.uniform(0.06, 0.25), a = rng.uniform(0, 2 * std::numbers::pi);
        bg.fx[k] = f * std::cos(a);
        bg.fy[k] = f * std::sin(a);
        bg.phase[k] = rng.uniform(0, 2 * std::numbers::pi);
    }
    for (auto& t : bg.tint) t = rng.uniform(0.6, 1.0);
    return bg;
}

void motion_blur(Image& img, bool horizontal) {
    const Image src = img;
    for (std::int64_t y = 0; y < img.height; ++y)
        for (std::int64_t x = 0; x < img.width; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                int sum = 0;
                for (std::int64_t d = -2; d <= 2; ++d) {
                    const auto sx = horizontal ? std::clamp<std::int64_t>(x + d, 0, img.width - 1) : x;
                    const auto sy = horizontal ? y : std::clamp<std::int64_t>(y + d, 0, img.height - 1);
                    sum += src.at(sx, sy)[c];
                }
                img.at(x, y)[c] = static_cast<std::uint8_t>((sum + 2) / 5);
            }
}

void add_noise(Image& img, Rng& rng, double sigma) {
    if (sigma <= 0) return;
    for (auto& p : img.pixels)
        p = static_cast<std::uint8_t>(std::clamp<long>(std::lround(static_cast<double>(p) + sigma * rng.normal()), 0, 255));
}

std::vector<bool> presence_pattern(VisibilityPattern pattern, std::int64_t L, Rng& rng) {
    std::vector<bool> present(static_cast<std::size_t>(L), true);
    if (pattern == VisibilityPattern::kRandom)
        pattern = static_cast<VisibilityPattern>(rng.uniform_int(0, 4));
    if (L < 4) return present;
    auto clear = [&](std::int64_t a, std::int64_t b) {
        for (std::int64_t i = a; i <= b; ++i) present[static_cast<std::size_t>(i)] = false;
    };
    switch (pattern) {
        case VisibilityPattern::kEnter: clear(0, rng.uniform_int(1, L / 2) - 1); break;
        case VisibilityPattern::kExit: clear(rng.uniform_int(L / 2, L - 2) + 1, L - 1); break;
        case VisibilityPattern::kEnterExit:
            clear(0, rng.uniform_int(1, L / 3) - 1);
            clear(rng.uniform_int((2 * L) / 3, L - 2) + 1, L - 1);
            break;
        case VisibilityPattern::kGap: {
            const auto len = rng.uniform_int(1, std::max<std::int64_t>(1, L / 4));
            const auto g0 = rng.uniform_int(1, L - 1 - len);
            clear(g0, g0 + len - 1);
            break;
        }
        default: break;
    }
    return present;
}

struct Mover {
    ShapeSpec shape;
    Placement place;
    double base_radius = 1;
};

void step_mover(Mover& m, Rng& rng, const SceneConfig& c, double shake_x, double shake_y) {
    const double side = static_cast<double>(c.canvas);
    m.place.cx += c.motion_sigma * rng.normal() + shake_x;
    m.place.cy += c.motion_sigma * rng.normal() + shake_y;
    const double margin = m.place.radius + 1.0;
    auto reflect = [&](double& v) {
        if (v < margin) v = 2 * margin - v;
        if (v > side - margin) v = 2 * (side - margin) - v;
        v = std::clamp(v, margin, side - margin);
    };
    reflect(m.place.cx);
    reflect(m.place.cy);
    m.place.angle = std::clamp(m.place.angle + 3.0 * kDeg * rng.normal(), -c.max_rotation_deg * kDeg,
                               c.max_rotation_deg * kDeg);
}

QueryVideoPair generate_attempt(std::uint64_t seed, const SceneConfig& c, std::int64_t L, const std::string& id) {
    Rng root(seed);
    Rng shape_rng = root.fork(1), motion_rng = root.fork(2), render_rng = root.fork(3), query_rng = root.fork(4);
    const double side = static_cast<double>(c.canvas);

    // Target and distractors share the shape family at the configured similarity.
    const double target_hue = shape_rng.uniform();
    const bool target_ellipse = shape_rng.bernoulli(0.35);
    const auto target_sides = shape_rng.uniform_int(3, 6);
    Mover target{random_shape(shape_rng, target_hue, target_ellipse, target_sides), {}, 0};
    target.base_radius = shape_rng.uniform(c.min_radius, c.max_radius);
    target.place = {shape_rng.uniform(target.base_radius + 1, side - target.base_radius - 1),
                    shape_rng.uniform(target.base_radius + 1, side - target.base_radius - 1), target.base_radius,
                    shape_rng.uniform(-c.max_rotation_deg, c.max_rotation_deg) * kDeg};

    std::vector<Mover> distractors;
    const auto count = shape_rng.uniform_int(c.min_distractors, c.max_distractors);
    for (std::int64_t i = 0; i < count; ++i) {
        const bool similar = shape_rng.bernoulli(c.distractor_similarity);
        double hue;
        if (similar) {
            const double offset = shape_rng.uniform(0.12, 0.12 + 0.38 * (1.0 - c.distractor_similarity));
            hue = target_hue + (shape_rng.bernoulli(0.5) ? offset : -offset);
        } else {
            do hue = shape_rng.uniform();
            while (hue_distance(hue, target_hue) < 0.12);
        }
        const bool ellipse = similar ? target_ellipse : shape_rng.bernoulli(0.5);
        const auto sides = similar ? target_sides : shape_rng.uniform_int(3, 6);
        Mover d{random_shape(shape_rng, hue, ellipse, sides), {}, 0};
        d.base_radius = shape_rng.uniform(c.min_radius, c.max_radius);
        d.place = {shape_rng.uniform(d.base_radius + 1, side - d.base_radius - 1),
                   shape_rng.uniform(d.base_radius + 1, side - d.base_radius - 1), d.base_radius,
                   shape_rng.uniform(-c.max_rotation_deg, c.max_rotation_deg) * kDeg};
        distractors.push_back(d);
    }

    const Background bg = random_background(shape_rng);
    const auto present = presence_pattern(c.visibility, L, motion_rng);

    QueryVideoPair pair;
    pair.pair_id = id;
    pair.seed = seed;
    pair.config = c;
    pair.target_shape = target.shape;
    double cam_x = 0, cam_y = 0;
    for (std::int64_t t = 0; t < L; ++t) {
        double sx = 0, sy = 0;
        if (t > 0) {
            sx = c.shake_sigma * motion_rng.normal();
            sy = c.shake_sigma * motion_rng.normal();
            cam_x += sx;
            cam_y += sy;
            step_mover(target, motion_rng, c, -sx, -sy);
            for (auto& d : distractors) step_mover(d, motion_rng, c, -sx, -sy);
        }

        Image img(c.canvas, c.canvas);
        for (std::int64_t y = 0; y < c.canvas; ++y)
            for (std::int64_t x = 0; x < c.canvas; ++x)
                for (std::int64_t ch = 0; ch < 3; ++ch)
                    img.at(x, y)[ch] = static_cast<std::uint8_t>(std::clamp(
                        std::lround(bg.value(ch, static_cast<double>(x) + cam_x, static_cast<double>(y) + cam_y)), 0L, 255L));
        for (const auto& d : distractors) draw_shape(img, d.shape, d.place, nullptr);

        FrameScene scene;
        scene.target = target.place;
        scene.target_present = present[static_cast<std::size_t>(t)];
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(c.canvas * c.canvas), 0);
        std::int64_t total = 0;
        if (scene.target_present) total = draw_shape(img, target.shape, target.place, &mask);

        const bool occlude = render_rng.bernoulli(c.occlusion_prob);
        const Box extent = shape_extent(target.shape, target.place);
        if (occlude && scene.target_present) {
            const double w = extent.width() * render_rng.uniform(0.5, 1.3);
            const double h = extent.height() * render_rng.uniform(0.5, 1.3);
            const double cx = (extent.x1 + extent.x2) / 2 + extent.width() * render_rng.uniform(-0.5, 0.5);
            const double cy = (extent.y1 + extent.y2) / 2 + extent.height() * render_rng.uniform(-0.5, 0.5);
            scene.occluded = true;
            scene.occluder = Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}.clamped(side);
            const auto grey = static_cast<std::uint8_t>(render_rng.uniform_int(40, 200));
            for (std::int64_t y = 0; y < c.canvas; ++y)
                for (std::int64_t x = 0; x < c.canvas; ++x) {
                    const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                    if (px < scene.occluder.x1 || px > scene.occluder.x2 || py < scene.occluder.y1 || py > scene.occluder.y2)
                        continue;
                    const auto shade = static_cast<std::uint8_t>(((x / 3 + y / 3) & 1) ? grey : grey / 2 + 20);
                    std::fill(img.at(x, y), img.at(x, y) + 3, shade);
                    mask[static_cast<std::size_t>(y * c.canvas + x)] = 0;
                }
        }

        std::int64_t visible = 0;
        std::int64_t bx1 = c.canvas, by1 = c.canvas, bx2 = -1, by2 = -1;
        for (std::int64_t y = 0; y < c.canvas; ++y)
            for (std::int64_t x = 0; x < c.canvas; ++x)
                if (mask[static_cast<std::size_t>(y * c.canvas + x)]) {
                    ++visible;
                    bx1 = std::min(bx1, x), by1 = std::min(by1, y), bx2 = std::max(bx2, x), by2 = std::max(by2, y);
                }
        scene.visible_fraction = total > 0 ? static_cast<double>(visible) / static_cast<double>(total) : 0.0;
        if (scene.target_present && total > 0 && scene.visible_fraction >= c.min_visible_fraction)
            pair.gt.boxes.emplace_back(Box{static_cast<double>(bx1), static_cast<double>(by1),
                                           static_cast<double>(bx2 + 1), static_cast<double>(by2 + 1)});
        else
            pair.gt.boxes.emplace_back(std::nullopt);

        if (render_rng.bernoulli(c.blur_prob)) motion_blur(img, render_rng.bernoulli(0.5));
        add_noise(img, render_rng, c.noise_sigma);
        pair.frames.push_back(std::move(img));
        pair.scenes.push_back(scene);
    }

    // The query shows the same instance large, centred, at a rotation outside the video range.
    const double qside = static_cast<double>(c.query_side);
    Image query(c.query_side, c.query_side);
    const double qgrey = query_rng.uniform(90, 170);
    for (auto& p : query.pixels) p = static_cast<std::uint8_t>(qgrey);
    const double qangle = query_rng.uniform(c.query_min_rotation_deg, c.query_max_rotation_deg) * kDeg *
                          (query_rng.bernoulli(0.5) ? 1.0 : -1.0);
    draw_shape(query, target.shape, {qside / 2, qside / 2, 0.42 * qside, qangle}, nullptr);
    add_noise(query, query_rng, c.noise_sigma);
    pair.query = std::move(query);
    return pair;
}

}  // namespace

bool shape_contains(const ShapeSpec& s, const Placement& p, double x, double y) {
    const auto [u, v] = to_local(p, x, y);
    if (s.ellipse) return u * u + (v / s.aspect) * (v / s.aspect) <= 1.0;
    bool inside = false;
    for (std::int64_t i = 0, j = s.sides - 1; i < s.sides; j = i++) {
        const auto [xi, yi] = polygon_vertex(s, i);
        const auto [xj, yj] = polygon_vertex(s, j);
        if ((yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
}

Box shape_extent(const ShapeSpec& s, const Placement& p) {
    const double c = std::cos(p.angle), sn = std::sin(p.angle);
    if (s.ellipse) {
        const double a = p.radius, b = p.radius * s.aspect;
        const double ex = std::sqrt(a * a * c * c + b * b * sn * sn);
        const double ey = std::sqrt(a * a * sn * sn + b * b * c * c);
        return {p.cx - ex, p.cy - ey, p.cx + ex, p.cy + ey};
    }
    Box b{INFINITY, INFINITY, -INFINITY, -INFINITY};
    for (std::int64_t k = 0; k < s.sides; ++k) {
        const auto [u, v] = polygon_vertex(s, k);
        // Inverse of to_local: local (u, v) * radius rotated by +angle.
        const double x = p.cx + p.radius * (c * u - sn * v);
        const double y = p.cy + p.radius * (sn * u + c * v);
        b.x1 = std::min(b.x1, x), b.y1 = std::min(b.y1, y), b.x2 = std::max(b.x2, x), b.y2 = std::max(b.y2, y);
    }
    return b;
}

QueryVideoPair generate_pair(std::uint64_t seed, const SceneConfig& config, std::int64_t frames,
                             const std::string& pair_id) {
    config.validate();
    if (frames < 1) throw ConfigError("a pair needs at least one frame");
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        QueryVideoPair pair = generate_attempt(seed + attempt * 0x9E3779B97F4A7C15ULL, config, frames, pair_id);
        for (const auto& b : pair.gt.boxes)
            if (b) {
                pair.seed = seed;
                return pair;
            }
    }
    throw ConfigError("scene config never yields a visible target");
}

std::uint64_t pair_seed(std::uint64_t seed, std::int64_t index) {
    Rng rng(seed ^ (0xA0761D6478BD642FULL * static_cast<std::uint64_t>(index + 1)));
    return rng.next_u64();
}

std::vector<QueryVideoPair> generate_dataset(std::uint64_t seed, const SceneConfig& config, std::int64_t pairs,
                                             std::int64_t frames, const std::string& prefix) {
    if (pairs < 1) throw ConfigError("dataset needs at least one pair");
    std::vector<QueryVideoPair> out;
    for (std::int64_t i = 0; i < pairs; ++i) {
        std::ostringstream id;
        id << prefix << '_' << std::setw(5) << std::setfill('0') << i;
        out.push_back(generate_pair(pair_seed(seed, i), config, frames, id.str()));
    }
    return out;
}

namespace {

std::string frame_name(std::int64_t i) {
    std::ostringstream s;
    s << "frame_" << std::setw(4) << std::setfill('0') << i << ".ppm";
    return s.str();
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void save_pair(const std::filesystem::path& root, const QueryVideoPair& pair) {
    const auto dir = root / pair.pair_id;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_ppm(dir / "query.ppm", pair.query);
    for (std::int64_t i = 0; i < pair.length(); ++i) write_ppm(dir / frame_name(i), pair.frames[static_cast<std::size_t>(i)]);

    json boxes = json::array(), occurrence = json::array();
    for (const auto& b : pair.gt.boxes) {
        occurrence.push_back(b.has_value());
        boxes.push_back(b ? json{b->x1, b->y1, b->x2, b->y2} : json(nullptr));
    }
    const ResponseTrack track = extract_response_track(pair.gt);
    json doc = {
        {"pair_id", pair.pair_id},
        {"seed", pair.seed},
        {"frames", pair.length()},
        {"occurrence", occurrence},
        {"boxes", boxes},
        {"response_track", {{"start", track.start}, {"end", track.end}}},
        {"config", json::parse(scene_config_to_json(pair.config))},
    };
    write_text(dir / "annotation.json", doc.dump(1) + "\n");
}

QueryVideoPair load_pair(const std::filesystem::path& dir) {
    const auto ann_path = dir / "annotation.json";
    const std::string where = ann_path.string();
    json doc;
    try {
        doc = json::parse(read_text(ann_path));
    } catch (const json::parse_error& e) {
        throw ParseError(where + ": " + e.what());
    }
    auto fail = [&](const std::string& field, const std::string& what) -> ParseError {
        return ParseError(where + ": field '" + field + "': " + what);
    };
    if (!doc.is_object()) throw ParseError(where + ": annotation must be a JSON object");
    static const std::vector<std::string> keys = {"pair_id", "seed", "frames", "occurrence", "boxes", "response_track", "config"};
    for (const auto& [key, value] : doc.items())
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw fail(key, "unknown key");
    for (const auto& key : keys)
        if (!doc.contains(key)) throw fail(key, "missing");

    QueryVideoPair pair;
    if (!doc["pair_id"].is_string()) throw fail("pair_id", "must be a string");
    pair.pair_id = doc["pair_id"].get<std::string>();
    if (!doc["seed"].is_number_unsigned() && !(doc["seed"].is_number_integer() && doc["seed"].get<std::int64_t>() >= 0))
        throw fail("seed", "must be a non-negative integer");
    pair.seed = doc["seed"].get<std::uint64_t>();
    if (!doc["frames"].is_number_integer() || doc["frames"].get<std::int64_t>() < 1) throw fail("frames", "must be a positive integer");
    const auto L = doc["frames"].get<std::int64_t>();
    const auto& occ = doc["occurrence"];
    const auto& boxes = doc["boxes"];
    if (!occ.is_array() || static_cast<std::int64_t>(occ.size()) != L) throw fail("occurrence", "must be an array of length frames");
    if (!boxes.is_array() || static_cast<std::int64_t>(boxes.size()) != L) throw fail("boxes", "must be an array of length frames");
    for (std::int64_t i = 0; i < L; ++i) {
        const auto& o = occ[static_cast<std::size_t>(i)];
        const auto& b = boxes[static_cast<std::size_t>(i)];
        if (!o.is_boolean()) throw fail("occurrence", "entries must be booleans");
        if (o.get<bool>() != !b.is_null()) throw fail("boxes", "entry " + std::to_string(i) + " disagrees with occurrence");
        if (b.is_null()) {
            pair.gt.boxes.emplace_back(std::nullopt);
            continue;
        }
        if (!b.is_array() || b.size() != 4) throw fail("boxes", "entry " + std::to_string(i) + " must be [x1, y1, x2, y2]");
        for (const auto& v : b)
            if (!v.is_number()) throw fail("boxes", "entry " + std::to_string(i) + " must be numeric");
        const Box box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!(box.x1 <= box.x2 && box.y1 <= box.y2)) throw fail("boxes", "entry " + std::to_string(i) + " is not ordered");
        pair.gt.boxes.emplace_back(box);
    }
    const auto& rt = doc["response_track"];
    if (!rt.is_object() || rt.size() != 2 || !rt.contains("start") || !rt.contains("end") ||
        !rt["start"].is_number_integer() || !rt["end"].is_number_integer())
        throw fail("response_track", "must be {start, end}");
    ResponseTrack expected;
    try {
        expected = extract_response_track(pair.gt);
    } catch (const ContractError&) {
        throw fail("occurrence", "target never occurs");
    }
    if (rt["start"].get<std::int64_t>() != expected.start || rt["end"].get<std::int64_t>() != expected.end)
        throw fail("response_track", "does not match the last visible run");
    try {
        pair.config = scene_config_from(doc["config"], SceneConfig{});
    } catch (const ConfigError& e) {
        throw fail("config", e.what());
    }

    pair.query = read_pnm(dir / "query.ppm");
    for (std::int64_t i = 0; i < L; ++i) pair.frames.push_back(read_pnm(dir / frame_name(i)));
    return pair;
}

void save_dataset(const std::filesystem::path& root, const std::vector<QueryVideoPair>& pairs) {
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    json ids = json::array();
    for (const auto& p : pairs) {
        save_pair(root, p);
        ids.push_back(p.pair_id);
    }
    write_text(root / "manifest.json", json{{"count", pairs.size()}, {"pairs", ids}}.dump(1) + "\n");
}

std::vector<QueryVideoPair> load_dataset(const std::filesystem::path& root) {
    const auto path = root / "manifest.json";
    json doc;
    try {
        doc = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    if (!doc.is_object() || doc.size() != 2 || !doc.contains("pairs") || !doc["pairs"].is_array() ||
        !doc.contains("count") || !doc["count"].is_number_integer())
        throw ParseError(path.string() + ": manifest must be {count, pairs}");
    if (doc["count"].get<std::size_t>() != doc["pairs"].size())
        throw ParseError(path.string() + ": count does not match the pair list");
    std::vector<QueryVideoPair> pairs;
    for (const auto& id : doc["pairs"]) {
        if (!id.is_string()) throw ParseError(path.string() + ": pair ids must be strings");
        pairs.push_back(load_pair(root / id.get<std::string>()));
    }
    if (pairs.empty()) throw ParseError(path.string() + ": dataset is empty");
    return pairs;
}

DatasetStats dataset_stats(const std::vector<QueryVideoPair>& pairs) {
    DatasetStats s;
    s.pairs = static_cast<std::int64_t>(pairs.size());
    double sum = 0;
    s.min_scale = INFINITY;
    for (const auto& p : pairs) {
        const double side = static_cast<double>(p.config.canvas);
        s.frames += p.length();
        for (const auto& b : p.gt.boxes) {
            if (!b) continue;
            const double scale = std::sqrt(b->area());
            ++s.visible_frames;
            sum += scale;
            s.min_scale = std::min(s.min_scale, scale);
            s.max_scale = std::max(s.max_scale, scale);
            if (scale < side / 8) ++s.small;
            else if (scale < side / 6) ++s.medium;
            else ++s.large;
        }
    }
    if (s.visible_frames == 0) s.min_scale = 0;
    else s.mean_scale = sum / static_cast<double>(s.visible_frames);
    return s;
}

}  // namespace prvql
