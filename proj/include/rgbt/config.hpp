#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/common.hpp"
#include "rgbt/diffusion.hpp"
#include "rgbt/schedule.hpp"
#include "rgbt/synth.hpp"
#include "rgbt/unet.hpp"

namespace rgbt {

inline nlohmann::json unet_config_to_json(const UNetConfig& c) {
    return {{"in_channels_source", c.in_channels_source},
            {"in_channels_target", c.in_channels_target},
            {"base_channels", c.base_channels},
            {"channel_mult", c.channel_mult},
            {"res_blocks_per_level", c.res_blocks_per_level},
            {"attention_levels", std::vector<int>(c.attention_levels.begin(),
                                                  c.attention_levels.end())},
            {"heads", c.heads},
            {"groupnorm_groups", c.groupnorm_groups},
            {"time_embed_dim", c.time_embed_dim},
            {"image_size", c.image_size},
            {"max_attention_tokens", c.max_attention_tokens}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.in_channels_source = j.value("in_channels_source", 3);
    c.in_channels_target = j.value("in_channels_target", 1);
    c.base_channels = j.value("base_channels", 64);
    c.channel_mult = j.value("channel_mult", std::vector<int>{1, 2, 2, 4});
    c.res_blocks_per_level = j.value("res_blocks_per_level", 2);
    auto levels = j.value("attention_levels", std::vector<int>{4, 8, 16});
    c.attention_levels = std::set<int>(levels.begin(), levels.end());
    c.heads = j.value("heads", 4);
    c.groupnorm_groups = j.value("groupnorm_groups", 16);
    c.time_embed_dim = j.value("time_embed_dim", 256);
    c.image_size = j.value("image_size", 64);
    c.max_attention_tokens = j.value("max_attention_tokens", i64(4096));
    return c;
}

// Where training/evaluation pairs come from: a generated synthetic set or an
// on-disk manifest (optionally filtered by day/night tag).
struct DataSpec {
    std::string kind = "synth";  // "synth" | "manifest"
    SynthSceneSpec synth;
    i64 synth_n = 128;
    i64 synth_first_index = 0;
    std::string manifest_path;
    std::string tag_filter = "all";  // "day" | "night" | "all"

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["kind"] = kind;
        if (kind == "synth") {
            j["synth"] = synth.to_json();
            j["synth_n"] = synth_n;
            j["synth_first_index"] = synth_first_index;
        } else {
            j["manifest"] = manifest_path;
            j["tag_filter"] = tag_filter;
        }
        return j;
    }

    static DataSpec from_json(const nlohmann::json& j) {
        DataSpec d;
        d.kind = j.value("kind", "synth");
        if (d.kind == "synth") {
            if (j.contains("synth")) d.synth = SynthSceneSpec::from_json(j.at("synth"));
            d.synth_n = j.value("synth_n", i64(128));
            d.synth_first_index = j.value("synth_first_index", i64(0));
        } else if (d.kind == "manifest") {
            d.manifest_path = j.value("manifest", "");
            d.tag_filter = j.value("tag_filter", "all");
        } else {
            throw ConfigError("unknown data kind: " + d.kind);
        }
        return d;
    }
};

struct OptimParams {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double eps = 1e-8;

    nlohmann::json to_json() const {
        return {{"lr", lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"weight_decay", weight_decay},
                {"eps", eps}};
    }

    static OptimParams from_json(const nlohmann::json& j) {
        OptimParams p;
        p.lr = j.value("lr", 1e-4);
        p.beta1 = j.value("beta1", 0.9);
        p.beta2 = j.value("beta2", 0.999);
        p.weight_decay = j.value("weight_decay", 0.0);
        p.eps = j.value("eps", 1e-8);
        return p;
    }
};

struct TrainConfig {
    DataSpec train_data;
    std::optional<DataSpec> val_data;
    std::string preset_variant;  // "I" | "II" | "" (explicit unet config)
    UNetConfig unet;
    ScheduleKind schedule_kind = ScheduleKind::cosine;
    int timesteps = 100;
    double beta_start = 1e-4, beta_end = 0.02;
    OptimParams optim;
    i64 batch_size = 8;
    i64 steps = 1000;
    double ema_decay = 0.999;
    std::uint64_t seed = 0;
    i64 ckpt_every = 0;  // 0 = final checkpoint only
    LossNorm loss_norm = LossNorm::l2;
    ReverseVariance reverse_variance = ReverseVariance::posterior;
    bool augment_flip = true;

    NoiseSchedule make_schedule() const {
        return NoiseSchedule::make(schedule_kind, timesteps, beta_start, beta_end);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["train_data"] = train_data.to_json();
        if (val_data) j["val_data"] = val_data->to_json();
        j["preset_variant"] = preset_variant;
        j["unet"] = unet_config_to_json(unet);
        j["schedule"] = {{"kind", to_string(schedule_kind)},
                         {"timesteps", timesteps},
                         {"beta_start", beta_start},
                         {"beta_end", beta_end}};
        j["optim"] = optim.to_json();
        j["batch_size"] = batch_size;
        j["steps"] = steps;
        j["ema_decay"] = ema_decay;
        j["seed"] = seed;
        j["ckpt_every"] = ckpt_every;
        j["loss_norm"] = to_string(loss_norm);
        j["reverse_variance"] = to_string(reverse_variance);
        j["augment_flip"] = augment_flip;
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("train_data")) c.train_data = DataSpec::from_json(j.at("train_data"));
        if (j.contains("val_data")) c.val_data = DataSpec::from_json(j.at("val_data"));
        c.preset_variant = j.value("preset_variant", "");
        if (!c.preset_variant.empty()) {
            const int size = j.contains("unet") ? j.at("unet").value("image_size", 64) : 64;
            c.unet = preset(c.preset_variant == "II" ? ModelVariant::II : ModelVariant::I, size);
            // explicit unet fields still override preset defaults
            if (j.contains("unet")) {
                auto merged = unet_config_to_json(c.unet);
                merged.update(j.at("unet"));
                c.unet = unet_config_from_json(merged);
            }
        } else if (j.contains("unet")) {
            c.unet = unet_config_from_json(j.at("unet"));
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.schedule_kind = schedule_kind_from_string(s.value("kind", "cosine"));
            c.timesteps = s.value("timesteps", 100);
            c.beta_start = s.value("beta_start", 1e-4);
            c.beta_end = s.value("beta_end", 0.02);
        }
        if (j.contains("optim")) c.optim = OptimParams::from_json(j.at("optim"));
        c.batch_size = j.value("batch_size", i64(8));
        c.steps = j.value("steps", i64(1000));
        c.ema_decay = j.value("ema_decay", 0.999);
        c.seed = j.value("seed", std::uint64_t(0));
        c.ckpt_every = j.value("ckpt_every", i64(0));
        c.loss_norm = loss_norm_from_string(j.value("loss_norm", "l2"));
        c.reverse_variance = reverse_variance_from_string(j.value("reverse_variance", "posterior"));
        c.augment_flip = j.value("augment_flip", true);
        return c;
    }

    std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

}  // namespace rgbt
