#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/checkpoint.hpp"
#include "rgbt/config.hpp"
#include "rgbt/data.hpp"
#include "rgbt/diffusion.hpp"
#include "rgbt/metrics.hpp"
#include "rgbt/optim.hpp"
#include "rgbt/unet.hpp"

namespace rgbt {

inline std::vector<ImagePair> resolve_dataset(const DataSpec& spec, int image_size,
                                              int target_channels) {
    if (spec.kind == "synth") {
        auto s = spec.synth;
        s.image_size = image_size;
        auto [pairs, oracle] = synth_generate(s, spec.synth_n, spec.synth_first_index);
        return std::move(pairs);
    }
    if (spec.kind == "manifest") {
        auto manifest = DatasetManifest::load(spec.manifest_path);
        auto loaded = load_dataset(manifest, {.image_size = image_size,
                                              .target_channels = target_channels});
        if (spec.tag_filter == "all") return std::move(loaded.pairs);
        const Tag want = tag_from_string(spec.tag_filter);
        std::vector<ImagePair> out;
        for (auto& p : loaded.pairs)
            if (p.tag == want) out.push_back(std::move(p));
        return out;
    }
    throw ConfigError("unknown data kind: " + spec.kind);
}

struct LossRow {
    i64 step;
    double loss;
    double lr;
    double seconds;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
    std::ofstream out(path);
    out << "step,loss,lr,seconds\n";
    out.setf(std::ios::fixed);
    for (const auto& r : rows) {
        out.precision(8);
        out << r.step << "," << r.loss << "," << r.lr << ",";
        out.precision(3);
        out << r.seconds << "\n";
    }
}

namespace detail {

inline Checkpoint run_training(const TrainConfig& cfg,
                               const std::vector<std::pair<std::string, std::vector<float>>>*
                                   init_weights,
                               const std::string& lineage_hash, const std::string& out_dir,
                               std::vector<LossRow>* curve) {
    cfg.unet.validate();
    auto pairs = resolve_dataset(cfg.train_data, cfg.unet.image_size,
                                 cfg.unet.in_channels_target);
    if (pairs.empty()) throw DataError("training dataset is empty");
    if (cfg.steps < 0) throw ConfigError("steps must be >= 0");

    auto sched = cfg.make_schedule();
    Rng root(cfg.seed);
    Rng init_rng = root.fork(0x696e6974);
    auto model = build_unet(cfg.unet, init_rng);
    if (init_weights) model.load_weights(*init_weights);

    // EMA tracks the raw weights from their initial state
    std::vector<std::pair<std::string, std::vector<float>>> ema = model.export_weights();

    Adam opt(cfg.optim);
    std::vector<LossRow> rows;
    const i64 n = static_cast<i64>(pairs.size());
    const auto t_start = std::chrono::steady_clock::now();

    std::vector<i64> order;
    i64 epoch = 0, cursor = 0;
    for (i64 step = 0; step < cfg.steps; ++step) {
        // deterministic epoch shuffles, refilled as the dataset is consumed
        std::vector<i64> batch_idx;
        while (static_cast<i64>(batch_idx.size()) < std::min(cfg.batch_size, n)) {
            if (cursor >= static_cast<i64>(order.size())) {
                order = shuffled_indices(n, Rng(cfg.seed).fork(0x65706f63).fork(epoch).next_u64());
                ++epoch;
                cursor = 0;
            }
            batch_idx.push_back(order[cursor++]);
        }

        std::vector<ImagePair> batch_pairs;
        batch_pairs.reserve(batch_idx.size());
        for (size_t i = 0; i < batch_idx.size(); ++i) {
            const auto& p = pairs[batch_idx[i]];
            if (cfg.augment_flip) {
                Rng aug = root.fork(0x617567).fork(step).fork(i);
                batch_pairs.push_back(augment(p, aug));
            } else {
                batch_pairs.push_back(p);
            }
        }
        std::vector<i64> local(batch_pairs.size());
        std::iota(local.begin(), local.end(), 0);
        auto batch = make_batch(batch_pairs, local);

        const i64 B = batch.x.shape()[0];
        Rng t_rng = root.fork(0x74).fork(step);
        std::vector<int> ts(B);
        for (i64 i = 0; i < B; ++i) ts[i] = static_cast<int>(t_rng.uniform_int(1, sched.T()));
        Rng e_rng = root.fork(0x657073).fork(step);
        auto eps = Tensor::randn(batch.y0.shape(), e_rng);

        auto loss = training_loss_batch(model, batch.x, batch.y0, ts, eps, sched, cfg.loss_norm);
        const double loss_val = loss.item();
        if (!std::isfinite(loss_val)) {
            std::ostringstream ids;
            for (const auto& id : batch.ids) ids << " " << id;
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               " on batch ids:" + ids.str());
        }
        loss.backward();
        opt.step(model.params());
        model.zero_grads();
        for (size_t k = 0; k < ema.size(); ++k) {
            ema_update(ema[k].second, model.params()[k].second.data(), cfg.ema_decay);
        }

        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        rows.push_back({step, loss_val, cfg.optim.lr, secs});

        if (!out_dir.empty() && cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 &&
            step + 1 < cfg.steps) {
            Checkpoint mid;
            mid.manifest = {{"version", Checkpoint::kVersion},
                            {"config", cfg.to_json()},
                            {"config_hash", cfg.hash()},
                            {"schedule", cfg.to_json()["schedule"]},
                            {"step", step + 1}};
            if (!lineage_hash.empty()) mid.manifest["lineage"] = {{"base_config_hash", lineage_hash}};
            mid.raw = model.export_weights();
            mid.ema = ema;
            mid.save((std::filesystem::path(out_dir) /
                      ("step_" + std::to_string(step + 1) + ".ckpt")).string());
        }
    }

    Checkpoint ckpt;
    ckpt.manifest = {{"version", Checkpoint::kVersion},
                     {"config", cfg.to_json()},
                     {"config_hash", cfg.hash()},
                     {"schedule", cfg.to_json()["schedule"]},
                     {"step", cfg.steps}};
    if (!lineage_hash.empty()) ckpt.manifest["lineage"] = {{"base_config_hash", lineage_hash}};
    ckpt.raw = model.export_weights();
    ckpt.ema = std::move(ema);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        ckpt.save((std::filesystem::path(out_dir) / "last.ckpt").string());
        write_loss_csv((std::filesystem::path(out_dir) / "loss.csv").string(), rows);
        std::ofstream cfg_out((std::filesystem::path(out_dir) / "config.json").string());
        cfg_out << cfg.to_json().dump(2) << "\n";
    }
    if (curve) *curve = std::move(rows);
    return ckpt;
}

// named-shape table comparison between a checkpoint and a target config
inline void check_architecture_compatible(const Checkpoint& base, const UNetConfig& want) {
    Rng rng(0);
    auto probe = build_unet(want, rng);
    const auto& params = probe.params();
    if (params.size() != base.raw.size()) {
        throw ConfigError("architecture mismatch: model has " + std::to_string(params.size()) +
                          " weight arrays, checkpoint has " + std::to_string(base.raw.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, tensor] = params[i];
        const auto& [ck_name, ck_values] = base.raw[i];
        if (name != ck_name || static_cast<i64>(ck_values.size()) != tensor.numel()) {
            throw ConfigError("architecture mismatch at array " + name + " (checkpoint has " +
                              ck_name + " with " + std::to_string(ck_values.size()) +
                              " values)");
        }
    }
}

}  // namespace detail

// Full optimization loop: per-step uniform t per sample, fresh Gaussian eps,
// Adam update, EMA tracking, checkpoints at the configured cadence.
inline Checkpoint train(const TrainConfig& cfg, const std::string& out_dir = "",
                        std::vector<LossRow>* curve = nullptr) {
    return detail::run_training(cfg, nullptr, "", out_dir, curve);
}

// Resumes weights from a compatible checkpoint with fresh optimizer state.
inline Checkpoint finetune(const Checkpoint& base, const TrainConfig& cfg, bool from_ema = false,
                           const std::string& out_dir = "", std::vector<LossRow>* curve = nullptr) {
    detail::check_architecture_compatible(base, cfg.unet);
    const auto& weights = from_ema ? base.ema : base.raw;
    const std::string lineage = base.manifest.value("config_hash", "");
    return detail::run_training(cfg, &weights, lineage, out_dir, curve);
}

struct EvalOptions {
    i64 n_samples = 16;
    std::uint64_t seed = 0;
    bool use_ema = true;
    int fid_dim = 48;
    std::uint64_t fid_seed = 2024;
};

// Samples the model once per evaluation pair (per-image derived seeds),
// scores PSNR/SSIM against ground truth on [0,1], Frechet distance and
// intensity spread between the generated and reference sets.
inline MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<ImagePair>& eval_set,
                              const EvalOptions& opts = {}) {
    if (eval_set.empty()) throw DataError("evaluate: empty evaluation set");
    auto cfg = ckpt.config();
    auto model = ckpt.build_model(opts.use_ema);
    auto sched = ckpt.schedule();

    const i64 n = std::min<i64>(opts.n_samples, static_cast<i64>(eval_set.size()));
    if (n < 2) throw DataError("evaluate: need at least 2 samples for feature statistics");

    std::vector<Image> generated, reference;
    MetricsReport report;
    for (i64 i = 0; i < n; ++i) {
        const auto& pair = eval_set[i];
        if (pair.source.h != cfg.unet.image_size || pair.source.w != cfg.unet.image_size) {
            throw ConfigError("evaluate: pair " + pair.id + " is " + std::to_string(pair.source.h) +
                              "x" + std::to_string(pair.source.w) + " but the checkpoint expects " +
                              std::to_string(cfg.unet.image_size));
        }
        if (pair.target.c != cfg.unet.in_channels_target) {
            throw ConfigError("evaluate: pair " + pair.id + " has " +
                              std::to_string(pair.target.c) +
                              " target channels, checkpoint expects " +
                              std::to_string(cfg.unet.in_channels_target));
        }
        Rng img_rng = Rng(opts.seed).fork(0x6576616c).fork(i);
        SampleOptions sopts;
        sopts.target_channels = cfg.unet.in_channels_target;
        sopts.var_mode = cfg.reverse_variance;
        auto gen = sample(model, to_tensor(pair.source), sched, img_rng, sopts);
        auto gen_img = from_tensor(gen);

        PerImageRecord rec;
        rec.id = pair.id;
        rec.psnr = psnr(denormalize(gen_img), denormalize(pair.target), 1.0);
        rec.ssim = ssim(denormalize(gen_img), denormalize(pair.target), {});
        report.per_image.push_back(rec);
        generated.push_back(std::move(gen_img));
        reference.push_back(pair.target);
    }

    double psnr_acc = 0, ssim_acc = 0;
    for (const auto& r : report.per_image) {
        psnr_acc += r.psnr;
        ssim_acc += r.ssim;
    }
    report.psnr_mean = psnr_acc / double(n);
    report.ssim_mean = ssim_acc / double(n);

    RandomProjectionExtractor extractor(opts.fid_seed, opts.fid_dim);
    report.fid = frechet_distance(feature_stats(generated, extractor),
                                  feature_stats(reference, extractor));
    report.fid_extractor = extractor.describe();
    report.gen_spread = intensity_spread(generated);
    report.ref_spread = intensity_spread(reference);
    return report;
}

// Per-set PSNR of copying the source luminance, the baseline a trained model
// has to beat.
inline double grayscale_copy_psnr(const std::vector<ImagePair>& pairs, i64 n_samples) {
    if (pairs.empty()) throw DataError("empty evaluation set");
    const i64 n = std::min<i64>(n_samples, static_cast<i64>(pairs.size()));
    double acc = 0;
    for (i64 i = 0; i < n; ++i) {
        acc += psnr(denormalize(luminance(pairs[i].source)), denormalize(pairs[i].target), 1.0);
    }
    return acc / double(n);
}

// ---------------------------------------------------------------------------
// Day/night training matrix (2 test rows x 3 training columns)
// ---------------------------------------------------------------------------

struct DayNightMatrixReport {
    // rows: day-test, night-test; columns: day-, night-, combined-trained
    MetricsReport grid[2][3];
    std::string column_names[3] = {"day", "night", "day+night"};
    std::string row_names[2] = {"day", "night"};

    nlohmann::json to_json() const {
        nlohmann::json j;
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                j[row_names[r]][column_names[c]] = grid[r][c].to_json();
            }
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(3);
        os << "Test Data | Metric | Day | Night | Day + Night\n";
        for (int r = 0; r < 2; ++r) {
            const char* metrics[3] = {"PSNR", "SSIM", "FID"};
            for (int m = 0; m < 3; ++m) {
                os << (r == 0 ? "Day" : "Night") << " | " << metrics[m];
                for (int c = 0; c < 3; ++c) {
                    const auto& rep = grid[r][c];
                    const double v = m == 0 ? rep.psnr_mean : (m == 1 ? rep.ssim_mean : rep.fid);
                    os << " | " << v;
                }
                os << "\n";
            }
        }
        return os.str();
    }
};

namespace detail {
inline nlohmann::json strip_data(const TrainConfig& cfg) {
    auto j = cfg.to_json();
    j.erase("train_data");
    if (j.contains("val_data")) j.erase("val_data");
    j.erase("seed");
    return j;
}
}  // namespace detail

// Trains day / night / combined models and evaluates each on both test sets.
inline DayNightMatrixReport ablation_matrix(const TrainConfig& day_cfg,
                                            const TrainConfig& night_cfg,
                                            const TrainConfig& combined_cfg,
                                            const std::vector<ImagePair>& day_test,
                                            const std::vector<ImagePair>& night_test,
                                            const EvalOptions& opts = {}) {
    // the three runs must share everything but their training data
    const auto a = detail::strip_data(day_cfg);
    if (detail::strip_data(night_cfg) != a || detail::strip_data(combined_cfg) != a) {
        throw ConfigError("ablation_matrix: configs must differ only in training data");
    }
    Checkpoint models[3] = {train(day_cfg), train(night_cfg), train(combined_cfg)};
    const std::vector<ImagePair>* tests[2] = {&day_test, &night_test};
    DayNightMatrixReport report;
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) report.grid[r][c] = evaluate(models[c], *tests[r], opts);
    return report;
}

// ---------------------------------------------------------------------------
// Self-attention resolution ablation (Model I vs Model II)
// ---------------------------------------------------------------------------

struct AttentionAblationReport {
    MetricsReport model_i, model_ii;
    i64 params_i = 0, params_ii = 0;
    double final_loss_i = 0, final_loss_ii = 0;

    nlohmann::json to_json() const {
        return {{"model_I",
                 {{"metrics", model_i.to_json()},
                  {"parameters", params_i},
                  {"final_loss", final_loss_i}}},
                {"model_II",
                 {{"metrics", model_ii.to_json()},
                  {"parameters", params_ii},
                  {"final_loss", final_loss_ii}}}};
    }

    std::string to_text() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(3);
        os << "Variant | PSNR | SSIM | FID\n";
        os << "Self-attention Model I | " << model_i.psnr_mean << " | " << model_i.ssim_mean
           << " | " << model_i.fid << "\n";
        os << "Self-attention Model II | " << model_ii.psnr_mean << " | " << model_ii.ssim_mean
           << " | " << model_ii.fid << "\n";
        return os.str();
    }
};

// Trains both attention variants and reports them side by side. Refuses
// configs that differ anywhere except attention_levels.
inline AttentionAblationReport ablate_attention(const TrainConfig& cfg_i,
                                                const TrainConfig& cfg_ii,
                                                const std::vector<ImagePair>& eval_set,
                                                const EvalOptions& opts = {}) {
    auto ja = cfg_i.to_json();
    auto jb = cfg_ii.to_json();
    ja["unet"].erase("attention_levels");
    jb["unet"].erase("attention_levels");
    ja.erase("preset_variant");
    jb.erase("preset_variant");
    if (ja != jb) {
        throw ConfigError("ablate_attention: configs must differ only in attention_levels");
    }

    std::vector<LossRow> curve_i, curve_ii;
    auto ck_i = train(cfg_i, "", &curve_i);
    auto ck_ii = train(cfg_ii, "", &curve_ii);

    // the architectural claim under test: II attends at factor 2, I does not
    auto model_i = ck_i.build_model(false);
    auto model_ii = ck_ii.build_model(false);
    if (model_i.has_attention_at(2) || !model_ii.has_attention_at(2)) {
        throw ConfigError("ablate_attention: variant attention placement is wrong");
    }

    AttentionAblationReport report;
    report.model_i = evaluate(ck_i, eval_set, opts);
    report.model_ii = evaluate(ck_ii, eval_set, opts);
    report.params_i = model_i.parameter_count();
    report.params_ii = model_ii.parameter_count();
    report.final_loss_i = curve_i.empty() ? 0.0 : curve_i.back().loss;
    report.final_loss_ii = curve_ii.empty() ? 0.0 : curve_ii.back().loss;
    return report;
}

}  // namespace rgbt
