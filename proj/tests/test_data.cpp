#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "rgbt/data.hpp"
#include "rgbt/metrics.hpp"

using namespace rgbt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("rgbt_test_" + std::to_string(std::random_device{}() % 1000000));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

double pooled_std(const std::vector<ImagePair>& pairs) {
    double s1 = 0, s2 = 0;
    i64 n = 0;
    for (const auto& p : pairs)
        for (float v : p.target.v) {
            s1 += v;
            s2 += double(v) * v;
            ++n;
        }
    const double m = s1 / n;
    return std::sqrt(std::max(0.0, s2 / n - m * m));
}

}  // namespace

TEST_CASE("png round trip 8-bit") {
    TempDir tmp;
    Image img(3, 9, 7);
    Rng rng(5);
    for (float& f : img.v) f = float(rng.uniform(0, 1));
    const auto path = (tmp.path / "a.png").string();
    write_png(path, img, 8);
    auto raw = read_png(path);
    CHECK(raw.width == 7);
    CHECK(raw.height == 9);
    CHECK(raw.channels == 3);
    CHECK(raw.bit_depth == 8);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 7; ++x)
            for (int c = 0; c < 3; ++c) {
                const double back = raw.pixels[(y * 7 + x) * 3 + c] / 255.0;
                CHECK(std::abs(back - img.at(c, y, x)) <= 0.5 / 255 + 1e-9);
            }
}

TEST_CASE("png round trip 16-bit gray") {
    TempDir tmp;
    Image img(1, 5, 6);
    Rng rng(6);
    for (float& f : img.v) f = float(rng.uniform(0, 1));
    const auto path = (tmp.path / "g.png").string();
    write_png(path, img, 16);
    auto raw = read_png(path);
    CHECK(raw.bit_depth == 16);
    CHECK(raw.channels == 1);
    for (i64 i = 0; i < img.numel(); ++i) {
        CHECK(std::abs(raw.pixels[i] / 65535.0 - img.v[i]) <= 0.5 / 65535 + 1e-9);
    }
}

TEST_CASE("missing and undecodable files raise DataError") {
    TempDir tmp;
    CHECK_THROWS_AS(read_png((tmp.path / "nope.png").string()), DataError);
    const auto bad = (tmp.path / "bad.png").string();
    std::ofstream(bad) << "this is not a png";
    CHECK_THROWS_AS(read_png(bad), DataError);
}

TEST_CASE("synthetic generation is bit-deterministic") {
    SynthSceneSpec spec;
    spec.image_size = 32;
    spec.seed = 99;
    auto [a, oa] = synth_generate(spec, 3);
    auto [b, ob] = synth_generate(spec, 3);
    REQUIRE(a.size() == 3);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        CHECK(std::memcmp(a[i].source.v.data(), b[i].source.v.data(),
                          sizeof(float) * a[i].source.numel()) == 0);
        CHECK(std::memcmp(a[i].target.v.data(), b[i].target.v.data(),
                          sizeof(float) * a[i].target.numel()) == 0);
    }
    // oracle reproduces the stored target exactly
    for (size_t i = 0; i < a.size(); ++i) {
        auto t = oa(a[i].id);
        CHECK(std::memcmp(t.v.data(), a[i].target.v.data(), sizeof(float) * t.numel()) == 0);
    }
}

TEST_CASE("synthetic pixels stay in [-1,1] and pairs are tagged") {
    SynthSceneSpec day;
    day.image_size = 32;
    day.seed = 7;
    auto [pairs, oracle] = synth_generate(day, 8);
    for (const auto& p : pairs) {
        CHECK(p.tag == Tag::day);
        for (float v : p.source.v) {
            CHECK(v >= -1.f);
            CHECK(v <= 1.f);
        }
        for (float v : p.target.v) {
            CHECK(v >= -1.f);
            CHECK(v <= 1.f);
        }
    }
}

TEST_CASE("pedestrians render hot above the background in day mode") {
    SynthSceneSpec spec;
    spec.image_size = 48;
    spec.seed = 31;
    spec.min_pedestrians = 2;
    spec.max_pedestrians = 3;
    auto [pairs, oracle] = synth_generate(spec, 6);
    for (const auto& p : pairs) {
        // pedestrian pixels are the >0.7 band by the generator rule; the
        // background is everything at or below the vehicle-body band
        std::vector<float> bg;
        std::vector<float> hot;
        for (float v : p.target.v) (v > 0.7f ? hot : bg).push_back(v);
        REQUIRE(!hot.empty());
        std::sort(bg.begin(), bg.end());
        const float p90 = bg[size_t(bg.size() * 0.9)];
        for (float v : hot) CHECK(v > p90);
    }
}

TEST_CASE("night mode compresses the target intensity spread") {
    SynthSceneSpec day;
    day.image_size = 32;
    day.seed = 1234;
    auto night = day;
    night.night = true;
    auto [dp, od] = synth_generate(day, 100);
    auto [np, on] = synth_generate(night, 100);
    CHECK(pooled_std(np) < pooled_std(dp));
    CHECK(dp[0].id == "day_000000");
    CHECK(np[0].id == "night_000000");

    // the metrics-module spread statistic separates the sets at n >= 100
    std::vector<Image> day_targets, night_targets;
    for (const auto& p : dp) day_targets.push_back(p.target);
    for (const auto& p : np) night_targets.push_back(p.target);
    auto ds = intensity_spread(day_targets);
    auto ns = intensity_spread(night_targets);
    CHECK(ds.std_dev > ns.std_dev);
    CHECK(ds.iqr >= ns.iqr);
}

TEST_CASE("augment flips jointly and preserves the tag") {
    SynthSceneSpec spec;
    spec.image_size = 16;
    spec.seed = 3;
    auto [pairs, oracle] = synth_generate(spec, 1);
    auto& p = pairs[0];
    p.tag = Tag::night;

    // draw until the coin lands on flip
    Rng rng(0);
    auto flipped = augment(p, rng);
    int attempts = 0;
    while (std::memcmp(flipped.source.v.data(), p.source.v.data(),
                       sizeof(float) * p.source.numel()) == 0 &&
           attempts++ < 64) {
        flipped = augment(p, rng);
    }
    REQUIRE(attempts < 64);
    CHECK(flipped.tag == Tag::night);
    // flipped source pixel (y,x) pairs with flipped target pixel (y,x)
    for (int y = 0; y < p.source.h; ++y)
        for (int x = 0; x < p.source.w; ++x) {
            CHECK(flipped.source.at(0, y, x) == p.source.at(0, y, p.source.w - 1 - x));
            CHECK(flipped.target.at(0, y, x) == p.target.at(0, y, p.target.w - 1 - x));
        }
    // flipping the flipped copy restores the original
    Rng rng2(0);
    auto twice = augment(flipped, rng2);
    attempts = 0;
    while (std::memcmp(twice.source.v.data(), flipped.source.v.data(),
                       sizeof(float) * p.source.numel()) == 0 &&
           attempts++ < 64) {
        twice = augment(flipped, rng2);
    }
    REQUIRE(attempts < 64);
    CHECK(std::memcmp(twice.source.v.data(), p.source.v.data(),
                      sizeof(float) * p.source.numel()) == 0);
}

TEST_CASE("batches partition the dataset deterministically") {
    SynthSceneSpec spec;
    spec.image_size = 16;
    spec.seed = 8;
    auto [pairs, oracle] = synth_generate(spec, 10);

    auto bs = batches(pairs, 4, 42);
    REQUIRE(bs.size() == 3);
    CHECK(bs[0].ids.size() == 4);
    CHECK(bs[1].ids.size() == 4);
    CHECK(bs[2].ids.size() == 2);

    std::vector<std::string> seen;
    for (const auto& b : bs)
        for (const auto& id : b.ids) seen.push_back(id);
    std::sort(seen.begin(), seen.end());
    std::vector<std::string> want;
    for (const auto& p : pairs) want.push_back(p.id);
    std::sort(want.begin(), want.end());
    CHECK(seen == want);  // union = dataset, no duplicates

    auto bs2 = batches(pairs, 4, 42);
    for (size_t i = 0; i < bs.size(); ++i) CHECK(bs[i].ids == bs2[i].ids);
    auto bs3 = batches(pairs, 4, 43);
    bool same_order = true;
    for (size_t i = 0; i < bs.size(); ++i) same_order = same_order && bs[i].ids == bs3[i].ids;
    CHECK_FALSE(same_order);

    CHECK_THROWS_AS(batches({}, 4, 0), DataError);
}

TEST_CASE("dataset writes and loads through the standard layout") {
    TempDir tmp;
    SynthSceneSpec spec;
    spec.image_size = 24;
    spec.seed = 55;
    auto [pairs, oracle] = synth_generate(spec, 5);
    auto manifest = write_dataset(pairs, tmp.path.string(), "train");

    auto loaded = load_dataset(manifest, {.image_size = 24, .target_channels = 1});
    REQUIRE(loaded.pairs.size() == 5);
    CHECK_FALSE(loaded.thermal_16bit);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(loaded.pairs[i].id == pairs[i].id);
        CHECK(loaded.pairs[i].tag == Tag::day);
        // 8-bit quantization bound on the round trip: 0.5/255 in [0,1],
        // doubled by the [-1,1] normalization
        double max_err = 0;
        for (i64 k = 0; k < pairs[i].target.numel(); ++k) {
            max_err = std::max(max_err, std::abs(double(loaded.pairs[i].target.v[k]) -
                                                 pairs[i].target.v[k]));
        }
        CHECK(max_err <= 1.0 / 255 + 1e-6);
    }

    // directory scan agrees with the written manifest
    auto scanned = DatasetManifest::scan_directory(tmp.path.string(), "train");
    REQUIRE(scanned.entries.size() == manifest.entries.size());
    for (size_t i = 0; i < scanned.entries.size(); ++i) {
        CHECK(scanned.entries[i].id == manifest.entries[i].id);
        CHECK(scanned.entries[i].tag == manifest.entries[i].tag);
    }

    // resize on load
    auto small = load_dataset(manifest, {.image_size = 16, .target_channels = 1});
    CHECK(small.pairs[0].source.h == 16);
    CHECK(small.pairs[0].source.w == 16);
    for (const auto& p : small.pairs)
        for (float v : p.source.v) {
            CHECK(v >= -1.f);
            CHECK(v <= 1.f);
        }
}

TEST_CASE("empty manifest loads to an empty sequence") {
    DatasetManifest m;
    m.root = ".";
    auto loaded = load_dataset(m);
    CHECK(loaded.pairs.empty());
}

TEST_CASE("missing files are reported with the path") {
    TempDir tmp;
    DatasetManifest m;
    m.root = tmp.path.string();
    ManifestEntry e;
    e.id = "gone";
    e.source_path = "rgb/gone.png";
    e.target_path = "thermal/gone.png";
    m.entries.push_back(e);
    try {
        load_dataset(m);
        FAIL("expected DataError");
    } catch (const DataError& err) {
        CHECK(std::string(err.what()).find("gone.png") != std::string::npos);
    }
}

TEST_CASE("16-bit thermal uses dataset-level percentile scaling") {
    TempDir tmp;
    fs::create_directories(tmp.path / "train" / "rgb");
    fs::create_directories(tmp.path / "train" / "thermal");
    // 16-bit thermal images spanning a narrow band of the raw range
    Rng rng(77);
    for (int i = 0; i < 2; ++i) {
        Image rgb(3, 8, 8);
        for (float& f : rgb.v) f = float(rng.uniform(0, 1));
        write_png((tmp.path / "train" / "rgb" / ("t" + std::to_string(i) + ".png")).string(), rgb,
                  8);
        Image th(1, 8, 8);
        for (float& f : th.v) f = float(rng.uniform(0.30, 0.34));
        write_png((tmp.path / "train" / "thermal" / ("t" + std::to_string(i) + ".png")).string(),
                  th, 16);
    }
    auto manifest = DatasetManifest::scan_directory(tmp.path.string(), "train");
    auto loaded = load_dataset(manifest, {.image_size = 0, .target_channels = 1});
    REQUIRE(loaded.thermal_16bit);
    CHECK(loaded.scale_hi > loaded.scale_lo);
    // after percentile scaling the narrow band stretches over most of [-1,1]
    float mn = 1, mx = -1;
    for (const auto& p : loaded.pairs)
        for (float v : p.target.v) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
    CHECK(mn <= -0.95f);
    CHECK(mx >= 0.95f);
}

TEST_CASE("native-size load rejects misaligned pairs") {
    TempDir tmp;
    fs::create_directories(tmp.path / "train" / "rgb");
    fs::create_directories(tmp.path / "train" / "thermal");
    Image rgb(3, 8, 8);
    Image th(1, 6, 8);  // different height
    write_png((tmp.path / "train" / "rgb" / "a.png").string(), rgb, 8);
    write_png((tmp.path / "train" / "thermal" / "a.png").string(), th, 8);
    auto manifest = DatasetManifest::scan_directory(tmp.path.string(), "train");
    CHECK_THROWS_AS(load_dataset(manifest, {.image_size = 0, .target_channels = 1}), DataError);
}

TEST_CASE("normalization endpoints") {
    TempDir tmp;
    fs::create_directories(tmp.path / "t" / "rgb");
    fs::create_directories(tmp.path / "t" / "thermal");
    Image img(1, 2, 2);
    img.v = {0.f, 1.f, 0.5f, 0.25f};
    write_png((tmp.path / "t" / "thermal" / "p.png").string(), img, 8);
    Image rgb(3, 2, 2, 0.5f);
    write_png((tmp.path / "t" / "rgb" / "p.png").string(), rgb, 8);
    auto manifest = DatasetManifest::scan_directory(tmp.path.string(), "t");
    auto loaded = load_dataset(manifest, {.image_size = 0, .target_channels = 1});
    // 8-bit 0 -> -1.0, 255 -> +1.0
    CHECK(loaded.pairs[0].target.v[0] == -1.f);
    CHECK(loaded.pairs[0].target.v[1] == 1.f);
}

TEST_CASE("pair-level training loss wrapper") {
    SynthSceneSpec spec;
    spec.image_size = 16;
    spec.seed = 12;
    auto [pairs, oracle] = synth_generate(spec, 1);
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 10, 1e-4, 0.02);
    Rng rng(1);
    auto eps = Tensor::randn({1, 1, 16, 16}, rng);
    struct Zero {
        Tensor forward(const Tensor&, const Tensor& yt, const std::vector<int>&) const {
            return Tensor::zeros(yt.shape());
        }
    } zero;
    auto loss = training_loss(zero, pairs[0], 4, eps, s, LossNorm::l2);
    CHECK(loss.item() > 0.5f);
    CHECK(loss.item() < 1.6f);
}
