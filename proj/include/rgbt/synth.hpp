#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/common.hpp"
#include "rgbt/image.hpp"
#include "rgbt/rng.hpp"

namespace rgbt {

// Procedural street scenes with a known RGB -> thermal rendering rule.
// Pedestrians are ellipses that render hot whatever their clothing color;
// vehicles are boxes with the hottest pixels on the tire strip; the thermal
// background is a smooth cool field uncorrelated with the RGB texture, so
// copying source luminance is a measurably bad baseline.
struct SynthSceneSpec {
    int image_size = 64;
    int min_pedestrians = 1, max_pedestrians = 3;
    int min_vehicles = 1, max_vehicles = 2;
    bool night = false;
    // night target range contraction (smaller = narrower band) and the RGB
    // brightness retained after dark
    double night_compression = 0.25;
    double night_rgb_gain = 0.25;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
        if (min_pedestrians < 0 || max_pedestrians < min_pedestrians || min_vehicles < 0 ||
            max_vehicles < min_vehicles) {
            throw ConfigError("synth: degenerate object count ranges");
        }
        if (night_compression <= 0 || night_compression >= 1 || night_rgb_gain <= 0 ||
            night_rgb_gain >= 1) {
            throw ConfigError("synth: night factors must be in (0, 1)");
        }
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size},
                {"min_pedestrians", min_pedestrians},
                {"max_pedestrians", max_pedestrians},
                {"min_vehicles", min_vehicles},
                {"max_vehicles", max_vehicles},
                {"night", night},
                {"night_compression", night_compression},
                {"night_rgb_gain", night_rgb_gain},
                {"seed", seed}};
    }

    static SynthSceneSpec from_json(const nlohmann::json& j) {
        SynthSceneSpec s;
        s.image_size = j.value("image_size", 64);
        s.min_pedestrians = j.value("min_pedestrians", 1);
        s.max_pedestrians = j.value("max_pedestrians", 3);
        s.min_vehicles = j.value("min_vehicles", 1);
        s.max_vehicles = j.value("max_vehicles", 2);
        s.night = j.value("night", false);
        s.night_compression = j.value("night_compression", 0.25);
        s.night_rgb_gain = j.value("night_rgb_gain", 0.25);
        s.seed = j.value("seed", std::uint64_t(0));
        return s;
    }

    bool operator==(const SynthSceneSpec&) const = default;
};

namespace synth_detail {

struct Blob {
    double cx, cy, r, amp_r, amp_g, amp_b;
};

struct Vehicle {
    int x0, y0, w, h;
    float r, g, b;
    float body_heat, tire_heat;
};

struct Pedestrian {
    double cx, cy, rx, ry;
    float r, g, b;
    float heat;
};

struct SceneParams {
    float sky_r, sky_g, sky_b;
    float ground_r, ground_g, ground_b;
    double thermal_grad;
    std::vector<Blob> blobs;
    std::vector<Vehicle> vehicles;
    std::vector<Pedestrian> pedestrians;
};

// All scene state comes from one forked stream, so (spec, index) fully
// determines the pair.
inline SceneParams roll_scene(const SynthSceneSpec& spec, i64 index) {
    Rng rng = Rng(spec.seed).fork(0x53594e54).fork(static_cast<std::uint64_t>(index));
    const int S = spec.image_size;
    SceneParams p;
    p.sky_r = float(rng.uniform(0.2, 0.55));
    p.sky_g = float(rng.uniform(0.35, 0.7));
    p.sky_b = float(rng.uniform(0.6, 0.95));
    p.ground_r = float(rng.uniform(0.25, 0.5));
    p.ground_g = float(rng.uniform(0.25, 0.5));
    p.ground_b = float(rng.uniform(0.2, 0.4));
    p.thermal_grad = rng.uniform(-0.08, 0.08);

    const int nblobs = static_cast<int>(rng.uniform_int(2, 4));
    for (int i = 0; i < nblobs; ++i) {
        Blob b;
        b.cx = rng.uniform(0, S);
        b.cy = rng.uniform(0, S);
        b.r = rng.uniform(S * 0.15, S * 0.45);
        b.amp_r = rng.uniform(-0.18, 0.18);
        b.amp_g = rng.uniform(-0.18, 0.18);
        b.amp_b = rng.uniform(-0.18, 0.18);
        p.blobs.push_back(b);
    }

    const int nveh = static_cast<int>(rng.uniform_int(spec.min_vehicles, spec.max_vehicles));
    for (int i = 0; i < nveh; ++i) {
        Vehicle v;
        v.w = static_cast<int>(rng.uniform_int(S / 6, S / 3));
        v.h = static_cast<int>(rng.uniform_int(S / 10, S / 6));
        v.x0 = static_cast<int>(rng.uniform_int(0, std::max(1, S - v.w - 1)));
        v.y0 = static_cast<int>(rng.uniform_int(S / 2, std::max(S / 2 + 1, S - v.h - 2)));
        v.r = float(rng.uniform(0.1, 0.9));
        v.g = float(rng.uniform(0.1, 0.9));
        v.b = float(rng.uniform(0.1, 0.9));
        v.body_heat = float(rng.uniform(-0.1, 0.25));
        v.tire_heat = float(rng.uniform(0.55, 0.75));
        p.vehicles.push_back(v);
    }

    const int nped = static_cast<int>(rng.uniform_int(spec.min_pedestrians, spec.max_pedestrians));
    for (int i = 0; i < nped; ++i) {
        Pedestrian d;
        d.rx = rng.uniform(S / 32.0, S / 16.0);
        d.ry = rng.uniform(S / 12.0, S / 7.0);
        d.cx = rng.uniform(d.rx + 1, S - d.rx - 1);
        d.cy = rng.uniform(S * 0.35, S - d.ry - 1);
        d.r = float(rng.uniform(0.05, 0.85));
        d.g = float(rng.uniform(0.05, 0.85));
        d.b = float(rng.uniform(0.05, 0.85));
        d.heat = float(rng.uniform(0.78, 0.92));
        p.pedestrians.push_back(d);
    }
    return p;
}

inline double blob_weight(const Blob& b, int x, int y) {
    const double dx = x - b.cx, dy = y - b.cy;
    return std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
}

}  // namespace synth_detail

// One rendered scene: RGB source, thermal target, both in [-1, 1].
struct SynthScene {
    Image source;  // [3,S,S]
    Image target;  // [1,S,S]
};

inline SynthScene render_scene(const SynthSceneSpec& spec, i64 index) {
    spec.validate();
    using namespace synth_detail;
    const int S = spec.image_size;
    const auto p = roll_scene(spec, index);
    // pixel noise gets its own stream so object counts do not shift it
    Rng noise = Rng(spec.seed).fork(0x4e4f4953).fork(static_cast<std::uint64_t>(index));

    Image rgb01(3, S, S);   // staged in [0,1]
    Image heat(1, S, S);    // staged in day-mode thermal units, roughly [-0.7, 1]

    const int horizon = S / 2;
    for (int y = 0; y < S; ++y) {
        const double depth = double(y) / S;
        for (int x = 0; x < S; ++x) {
            float r, g, b;
            if (y < horizon) {
                const float m = float(y) / horizon;  // fade toward the horizon
                r = p.sky_r * (1 - 0.3f * m) + 0.25f * m;
                g = p.sky_g * (1 - 0.3f * m) + 0.25f * m;
                b = p.sky_b * (1 - 0.3f * m) + 0.25f * m;
            } else {
                r = p.ground_r;
                g = p.ground_g;
                b = p.ground_b;
            }
            for (const auto& bl : p.blobs) {
                const double w = blob_weight(bl, x, y);
                r += float(bl.amp_r * w);
                g += float(bl.amp_g * w);
                b += float(bl.amp_b * w);
            }
            const float tex = float(noise.uniform(-0.04, 0.04));
            rgb01.at(0, y, x) = r + tex;
            rgb01.at(1, y, x) = g + tex;
            rgb01.at(2, y, x) = b + float(noise.uniform(-0.02, 0.02));
            // cool smooth background; sky colder than ground
            const float base = y < horizon ? -0.62f : -0.5f;
            heat.at(0, y, x) = base + float(p.thermal_grad * depth) +
                               float(noise.uniform(-0.015, 0.015));
        }
    }

    for (const auto& v : p.vehicles) {
        const int y1 = std::min(S - 1, v.y0 + v.h);
        const int x1 = std::min(S - 1, v.x0 + v.w);
        for (int y = v.y0; y <= y1; ++y)
            for (int x = v.x0; x <= x1; ++x) {
                rgb01.at(0, y, x) = v.r;
                rgb01.at(1, y, x) = v.g;
                rgb01.at(2, y, x) = v.b;
                heat.at(0, y, x) = v.body_heat;
            }
        // tires: dark in RGB, hottest pixels of the vehicle
        const int tire_h = std::max(1, v.h / 4);
        const int tire_w = std::max(1, v.w / 5);
        for (int side = 0; side < 2; ++side) {
            const int tx0 = side == 0 ? v.x0 : x1 - tire_w + 1;
            for (int y = y1 - tire_h + 1; y <= y1; ++y)
                for (int x = tx0; x < tx0 + tire_w; ++x) {
                    if (y < 0 || y >= S || x < 0 || x >= S) continue;
                    rgb01.at(0, y, x) = 0.05f;
                    rgb01.at(1, y, x) = 0.05f;
                    rgb01.at(2, y, x) = 0.05f;
                    heat.at(0, y, x) = v.tire_heat;
                }
        }
    }

    for (const auto& d : p.pedestrians) {
        const int y0 = std::max(0, int(d.cy - d.ry)), y1 = std::min(S - 1, int(d.cy + d.ry));
        const int x0 = std::max(0, int(d.cx - d.rx)), x1 = std::min(S - 1, int(d.cx + d.rx));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double u = (x - d.cx) / d.rx, w = (y - d.cy) / d.ry;
                if (u * u + w * w > 1.0) continue;
                rgb01.at(0, y, x) = d.r;
                rgb01.at(1, y, x) = d.g;
                rgb01.at(2, y, x) = d.b;
                heat.at(0, y, x) = d.heat;  // hot regardless of clothing color
            }
    }

    SynthScene out;
    out.source = Image(3, S, S);
    out.target = Image(1, S, S);
    const float gain = static_cast<float>(spec.night_rgb_gain);
    const float comp = static_cast<float>(spec.night_compression);
    for (i64 i = 0; i < rgb01.numel(); ++i) {
        float f = std::min(1.f, std::max(0.f, rgb01.v[i]));
        if (spec.night) f = f * gain + 0.02f;  // darkened, low contrast
        out.source.v[i] = 2.f * f - 1.f;
    }
    for (i64 i = 0; i < heat.numel(); ++i) {
        float t = heat.v[i];
        // night compresses the dynamic range into a narrow cool band
        if (spec.night) t = comp * t - (0.45f - 0.4f * comp);
        out.target.v[i] = std::min(1.f, std::max(-1.f, t));
    }
    return out;
}

// The exact rendering rule, exposed as a source -> target mapping for the
// pairs this generator produced. Targets are re-rendered from (spec, index),
// never stored, so the oracle is a pure function.
class SynthOracle {
  public:
    SynthOracle() = default;
    explicit SynthOracle(SynthSceneSpec spec) : spec_(std::move(spec)) {}

    const SynthSceneSpec& spec() const { return spec_; }

    Image target_for_index(i64 index) const { return render_scene(spec_, index).target; }

    static std::string id_for_index(i64 index, bool night) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%06lld", night ? "night" : "day",
                      static_cast<long long>(index));
        return buf;
    }

    static i64 index_from_id(const std::string& id) {
        const auto pos = id.rfind('_');
        if (pos == std::string::npos) throw DataError("not a synthetic pair id: " + id);
        return std::stoll(id.substr(pos + 1));
    }

    Image operator()(const std::string& pair_id) const {
        return target_for_index(index_from_id(pair_id));
    }

    nlohmann::json to_json() const { return {{"kind", "synth"}, {"spec", spec_.to_json()}}; }

  private:
    SynthSceneSpec spec_;
};

}  // namespace rgbt
