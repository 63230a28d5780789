#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/common.hpp"
#include "rgbt/diffusion.hpp"
#include "rgbt/image.hpp"
#include "rgbt/rng.hpp"
#include "rgbt/synth.hpp"

namespace rgbt {

namespace fs = std::filesystem;

enum class Tag { day, night, untagged };

inline std::string to_string(Tag t) {
    switch (t) {
        case Tag::day: return "day";
        case Tag::night: return "night";
        default: return "untagged";
    }
}

inline Tag tag_from_string(const std::string& s) {
    if (s == "day") return Tag::day;
    if (s == "night") return Tag::night;
    if (s == "untagged" || s.empty()) return Tag::untagged;
    throw DataError("unknown tag: " + s);
}

// Aligned source/target pair, both normalized to [-1, 1].
struct ImagePair {
    std::string id;
    Tag tag = Tag::untagged;
    Image source;  // [3,H,W]
    Image target;  // [Ct,H,W]
};

struct ManifestEntry {
    std::string id;
    std::string source_path;  // relative to the manifest's root
    std::string target_path;
    Tag tag = Tag::untagged;
};

struct DatasetManifest {
    std::string root;  // absolute or relative directory holding the files
    std::string split = "train";
    std::vector<ManifestEntry> entries;

    void save(const std::string& path) const {
        nlohmann::json j;
        // keep manifests relocatable: paths resolve against the manifest's
        // own directory unless an explicit root is recorded
        j["root"] = fs::weakly_canonical(root) == fs::weakly_canonical(fs::path(path).parent_path())
                        ? "."
                        : root;
        j["split"] = split;
        auto& arr = j["entries"] = nlohmann::json::array();
        for (const auto& e : entries) {
            arr.push_back({{"id", e.id},
                           {"source", e.source_path},
                           {"target", e.target_path},
                           {"tag", to_string(e.tag)}});
        }
        std::ofstream out(path);
        if (!out) throw DataError("cannot write manifest " + path);
        out << j.dump(2) << "\n";
    }

    static DatasetManifest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open manifest " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad manifest " + path + ": " + e.what());
        }
        DatasetManifest m;
        m.root = j.value("root", ".");
        if (m.root.empty() || m.root == ".") m.root = fs::path(path).parent_path().string();
        if (m.root.empty()) m.root = ".";
        m.split = j.value("split", "train");
        for (const auto& e : j.at("entries")) {
            ManifestEntry me;
            me.id = e.at("id").get<std::string>();
            me.source_path = e.at("source").get<std::string>();
            me.target_path = e.at("target").get<std::string>();
            me.tag = tag_from_string(e.value("tag", "untagged"));
            m.entries.push_back(std::move(me));
        }
        return m;
    }

    // root/{split}/{rgb,thermal}/<id>.png plus optional root/{split}/tags.csv
    static DatasetManifest scan_directory(const std::string& root, const std::string& split) {
        DatasetManifest m;
        const fs::path base = fs::path(root) / split;
        m.root = base.string();
        m.split = split;
        const fs::path rgb = base / "rgb";
        const fs::path thermal = base / "thermal";
        if (!fs::is_directory(rgb) || !fs::is_directory(thermal)) {
            throw DataError("dataset layout missing rgb/ or thermal/ under " + base.string());
        }
        std::map<std::string, Tag> tags;
        const fs::path tags_csv = base / "tags.csv";
        if (fs::exists(tags_csv)) {
            std::ifstream in(tags_csv);
            std::string line;
            if (!std::getline(in, line) || line.rfind("id,tag", 0) != 0) {
                throw DataError("tags.csv must start with an 'id,tag' header: " +
                                tags_csv.string());
            }
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto comma = line.find(',');
                if (comma == std::string::npos) throw DataError("bad tags.csv line: " + line);
                tags[line.substr(0, comma)] = tag_from_string(line.substr(comma + 1));
            }
        }
        std::vector<std::string> ids;
        for (const auto& p : fs::directory_iterator(rgb)) {
            if (p.path().extension() == ".png") ids.push_back(p.path().stem().string());
        }
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
            ManifestEntry e;
            e.id = id;
            e.source_path = (fs::path("rgb") / (id + ".png")).string();
            e.target_path = (fs::path("thermal") / (id + ".png")).string();
            if (!fs::exists(thermal / (id + ".png"))) {
                throw DataError("missing thermal pair for id " + id);
            }
            auto it = tags.find(id);
            e.tag = it == tags.end() ? Tag::untagged : it->second;
            m.entries.push_back(std::move(e));
        }
        return m;
    }
};

struct LoadOptions {
    int image_size = 64;        // 0 keeps native resolution
    int target_channels = 1;    // 1 or 3
};

struct LoadedDataset {
    std::vector<ImagePair> pairs;
    // 16-bit thermal scaling actually applied (percentile clip), recorded for
    // reproducibility
    bool thermal_16bit = false;
    double scale_lo = 0, scale_hi = 0;
};

namespace detail {

inline Image raw_to_image01(const RawPng& raw, int want_channels, double lo16, double hi16) {
    Image img(want_channels, raw.height, raw.width);
    const double denom8 = 255.0;
    for (int y = 0; y < raw.height; ++y) {
        for (int x = 0; x < raw.width; ++x) {
            for (int ch = 0; ch < want_channels; ++ch) {
                const int src_ch = raw.channels == 1 ? 0 : std::min(ch, raw.channels - 1);
                const double v = raw.pixels[(i64(y) * raw.width + x) * raw.channels + src_ch];
                double f;
                if (raw.bit_depth == 16) {
                    f = (v - lo16) / std::max(1.0, hi16 - lo16);
                } else {
                    f = v / denom8;
                }
                img.at(ch, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, f)));
            }
        }
    }
    return img;
}

// 1% / 99% quantiles over the pooled 16-bit histogram of the whole dataset.
inline void percentile_16bit(const std::vector<std::uint64_t>& hist, std::uint64_t total,
                             double& lo, double& hi) {
    const std::uint64_t lo_rank = static_cast<std::uint64_t>(total * 0.01);
    const std::uint64_t hi_rank = static_cast<std::uint64_t>(total * 0.99);
    std::uint64_t acc = 0;
    lo = 0;
    hi = 65535;
    bool lo_set = false;
    for (int v = 0; v < 65536; ++v) {
        acc += hist[v];
        if (!lo_set && acc > lo_rank) {
            lo = v;
            lo_set = true;
        }
        if (acc >= hi_rank) {
            hi = v;
            break;
        }
    }
    if (hi <= lo) hi = lo + 1;
}

}  // namespace detail

// Decodes, resizes and normalizes every pair in the manifest, ordered by id.
// 16-bit thermal inputs are min-max scaled per dataset with a 1%/99%
// percentile clip before the [-1,1] normalization.
inline LoadedDataset load_dataset(const DatasetManifest& manifest, const LoadOptions& opts = {}) {
    if (opts.target_channels != 1 && opts.target_channels != 3) {
        throw DataError("target_channels must be 1 or 3");
    }
    LoadedDataset out;
    auto entries = manifest.entries;
    std::sort(entries.begin(), entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.id < b.id; });

    // first pass: existence checks and the pooled 16-bit histogram
    std::vector<std::uint64_t> hist;
    std::uint64_t total16 = 0;
    for (const auto& e : entries) {
        const auto spath = (fs::path(manifest.root) / e.source_path).string();
        const auto tpath = (fs::path(manifest.root) / e.target_path).string();
        if (!fs::exists(spath)) throw DataError("missing file " + spath);
        if (!fs::exists(tpath)) throw DataError("missing file " + tpath);
        auto traw = read_png(tpath);
        if (traw.bit_depth == 16) {
            if (hist.empty()) hist.assign(65536, 0);
            for (auto v : traw.pixels) ++hist[v];
            total16 += traw.pixels.size();
        }
    }
    double lo = 0, hi = 65535;
    if (total16 > 0) {
        detail::percentile_16bit(hist, total16, lo, hi);
        out.thermal_16bit = true;
        out.scale_lo = lo;
        out.scale_hi = hi;
    }

    for (const auto& e : entries) {
        const auto spath = (fs::path(manifest.root) / e.source_path).string();
        const auto tpath = (fs::path(manifest.root) / e.target_path).string();
        auto sraw = read_png(spath);
        auto traw = read_png(tpath);
        Image src01 = detail::raw_to_image01(sraw, 3, 0, 65535);
        Image tgt01 = detail::raw_to_image01(traw, opts.target_channels, lo, hi);
        if (opts.image_size > 0) {
            if (src01.h != opts.image_size || src01.w != opts.image_size) {
                src01 = resize_bilinear(src01, opts.image_size, opts.image_size);
            }
            if (tgt01.h != opts.image_size || tgt01.w != opts.image_size) {
                tgt01 = resize_bilinear(tgt01, opts.image_size, opts.image_size);
            }
        }
        if (src01.h != tgt01.h || src01.w != tgt01.w) {
            throw DataError("pair " + e.id + " misaligned after load: source " +
                            std::to_string(src01.h) + "x" + std::to_string(src01.w) +
                            " vs target " + std::to_string(tgt01.h) + "x" +
                            std::to_string(tgt01.w));
        }
        ImagePair pair;
        pair.id = e.id;
        pair.tag = e.tag;
        pair.source = normalize01(src01);
        pair.target = normalize01(tgt01);
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

// Generates n scenes plus the exact oracle mapping for them.
inline std::pair<std::vector<ImagePair>, SynthOracle> synth_generate(const SynthSceneSpec& spec,
                                                                     i64 n, i64 first_index = 0) {
    spec.validate();
    if (n < 1) throw ConfigError("synth_generate needs n >= 1");
    std::vector<ImagePair> pairs;
    pairs.reserve(n);
    for (i64 i = 0; i < n; ++i) {
        const i64 index = first_index + i;
        auto scene = render_scene(spec, index);
        ImagePair p;
        p.id = SynthOracle::id_for_index(index, spec.night);
        p.tag = spec.night ? Tag::night : Tag::day;
        p.source = std::move(scene.source);
        p.target = std::move(scene.target);
        pairs.push_back(std::move(p));
    }
    return {std::move(pairs), SynthOracle(spec)};
}

// Writes pairs in the standard on-disk layout and returns the manifest.
inline DatasetManifest write_dataset(const std::vector<ImagePair>& pairs, const std::string& root,
                                     const std::string& split, int bit_depth = 8) {
    const fs::path base = fs::path(root) / split;
    fs::create_directories(base / "rgb");
    fs::create_directories(base / "thermal");
    DatasetManifest m;
    m.root = base.string();
    m.split = split;
    std::ofstream tags((base / "tags.csv").string());
    tags << "id,tag\n";
    for (const auto& p : pairs) {
        write_png((base / "rgb" / (p.id + ".png")).string(), denormalize(p.source), 8);
        write_png((base / "thermal" / (p.id + ".png")).string(), denormalize(p.target), bit_depth);
        tags << p.id << "," << to_string(p.tag) << "\n";
        ManifestEntry e;
        e.id = p.id;
        e.source_path = (fs::path("rgb") / (p.id + ".png")).string();
        e.target_path = (fs::path("thermal") / (p.id + ".png")).string();
        e.tag = p.tag;
        m.entries.push_back(std::move(e));
    }
    m.save((base / "manifest.json").string());
    return m;
}

// Horizontal flip with probability 0.5, applied jointly to both images.
inline ImagePair augment(const ImagePair& pair, Rng& rng) {
    if (!rng.bernoulli(0.5)) return pair;
    ImagePair out = pair;
    auto flip = [](const Image& img) {
        Image f = img;
        for (int ch = 0; ch < img.c; ++ch)
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x) f.at(ch, y, x) = img.at(ch, y, img.w - 1 - x);
        return f;
    };
    out.source = flip(pair.source);
    out.target = flip(pair.target);
    return out;
}

struct Batch {
    Tensor x;   // [N,3,H,W]
    Tensor y0;  // [N,Ct,H,W]
    std::vector<Tag> tags;
    std::vector<std::string> ids;
};

inline Batch make_batch(const std::vector<ImagePair>& pairs, const std::vector<i64>& idx) {
    if (idx.empty()) throw DataError("empty batch");
    const auto& first = pairs.at(idx[0]);
    const i64 N = static_cast<i64>(idx.size());
    const i64 sc = first.source.c, tc = first.target.c, H = first.source.h, W = first.source.w;
    Batch b;
    b.x = Tensor::zeros({N, sc, H, W});
    b.y0 = Tensor::zeros({N, tc, H, W});
    for (i64 n = 0; n < N; ++n) {
        const auto& p = pairs.at(idx[n]);
        if (p.source.h != H || p.source.w != W || p.target.h != H || p.target.w != W) {
            throw DataError("pair " + p.id + " does not match batch geometry");
        }
        std::copy(p.source.v.begin(), p.source.v.end(), b.x.data().begin() + n * sc * H * W);
        std::copy(p.target.v.begin(), p.target.v.end(), b.y0.data().begin() + n * tc * H * W);
        b.tags.push_back(p.tag);
        b.ids.push_back(p.id);
    }
    return b;
}

inline std::vector<i64> shuffled_indices(i64 n, std::uint64_t seed) {
    std::vector<i64> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (i64 i = n - 1; i > 0; --i) {
        const i64 j = rng.uniform_int(0, i);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

// Deterministic shuffled batches for one epoch; the final partial batch is
// kept.
inline std::vector<Batch> batches(const std::vector<ImagePair>& pairs, i64 batch_size,
                                  std::uint64_t shuffle_seed) {
    if (pairs.empty()) throw DataError("batches: empty dataset");
    if (batch_size < 1) throw DataError("batches: batch_size must be >= 1");
    auto idx = shuffled_indices(static_cast<i64>(pairs.size()), shuffle_seed);
    std::vector<Batch> out;
    for (size_t at = 0; at < idx.size(); at += batch_size) {
        std::vector<i64> chunk(idx.begin() + at,
                               idx.begin() + std::min(idx.size(), at + batch_size));
        out.push_back(make_batch(pairs, chunk));
    }
    return out;
}

// Pair-level wrapper over the batched objective.
template <class Model>
Tensor training_loss(Model& model, const ImagePair& pair, int t, const Tensor& eps,
                     const NoiseSchedule& s, LossNorm norm) {
    auto x = to_tensor(pair.source);
    auto y0 = to_tensor(pair.target);
    auto e = eps;
    if (e.shape().size() == 3) {
        e = reshape(e, {1, e.shape()[0], e.shape()[1], e.shape()[2]});
    }
    return training_loss_batch(model, x, y0, {t}, e, s, norm);
}

}  // namespace rgbt
