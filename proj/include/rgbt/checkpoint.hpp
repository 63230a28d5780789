#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgbt/common.hpp"
#include "rgbt/config.hpp"
#include "rgbt/unet.hpp"

namespace rgbt {

// Single-file container: JSON manifest followed by length-prefixed named
// float32 arrays, all multi-byte values little-endian. Raw weights carry the
// "raw/" prefix, the exponential moving average the "ema/" prefix.
class Checkpoint {
  public:
    static constexpr char kMagic[9] = "RGBTCKP1";
    static constexpr std::uint32_t kVersion = 1;

    nlohmann::json manifest;
    std::vector<std::pair<std::string, std::vector<float>>> raw;
    std::vector<std::pair<std::string, std::vector<float>>> ema;

    TrainConfig config() const { return TrainConfig::from_json(manifest.at("config")); }

    NoiseSchedule schedule() const {
        const auto& s = manifest.at("schedule");
        return NoiseSchedule::make(schedule_kind_from_string(s.at("kind").get<std::string>()),
                                   s.at("timesteps").get<int>(), s.at("beta_start").get<double>(),
                                   s.at("beta_end").get<double>());
    }

    UNet build_model(bool use_ema) const {
        auto cfg = config();
        Rng rng(0);
        auto model = build_unet(cfg.unet, rng);
        model.load_weights(use_ema ? ema : raw);
        return model;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + path);
        out.write(kMagic, 8);
        write_u32(out, kVersion);
        const std::string mani = manifest.dump();
        write_u64(out, mani.size());
        out.write(mani.data(), static_cast<std::streamsize>(mani.size()));
        write_u32(out, static_cast<std::uint32_t>(raw.size() + ema.size()));
        for (const auto& [name, values] : raw) write_array(out, "raw/" + name, values);
        for (const auto& [name, values] : ema) write_array(out, "ema/" + name, values);
        if (!out) throw DataError("short write on checkpoint " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open checkpoint " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0) {
            throw DataError("not a checkpoint file: " + path);
        }
        const auto version = read_u32(in);
        if (version != kVersion) {
            throw DataError("unsupported checkpoint version " + std::to_string(version));
        }
        const auto mani_len = read_u64(in);
        std::string mani(mani_len, '\0');
        in.read(mani.data(), static_cast<std::streamsize>(mani_len));
        Checkpoint c;
        try {
            c.manifest = nlohmann::json::parse(mani);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad checkpoint manifest: " + std::string(e.what()));
        }
        const auto count = read_u32(in);
        for (std::uint32_t i = 0; i < count; ++i) {
            auto [name, values] = read_array(in);
            if (name.rfind("raw/", 0) == 0) {
                c.raw.emplace_back(name.substr(4), std::move(values));
            } else if (name.rfind("ema/", 0) == 0) {
                c.ema.emplace_back(name.substr(4), std::move(values));
            } else {
                throw DataError("unknown weight section for array " + name);
            }
        }
        if (!in) throw DataError("truncated checkpoint " + path);
        return c;
    }

  private:
    static void write_u32(std::ostream& o, std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        o.write(b, 4);
    }
    static void write_u64(std::ostream& o, std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        o.write(b, 8);
    }
    static std::uint32_t read_u32(std::istream& in) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
        return v;
    }
    static std::uint64_t read_u64(std::istream& in) {
        unsigned char b[8];
        in.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
        return v;
    }
    static void write_array(std::ostream& o, const std::string& name,
                            const std::vector<float>& values) {
        write_u32(o, static_cast<std::uint32_t>(name.size()));
        o.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(o, values.size());
        for (float f : values) write_u32(o, std::bit_cast<std::uint32_t>(f));
    }
    static std::pair<std::string, std::vector<float>> read_array(std::istream& in) {
        const auto name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto count = read_u64(in);
        std::vector<float> values(count);
        for (auto& f : values) f = std::bit_cast<float>(read_u32(in));
        return {std::move(name), std::move(values)};
    }
};

}  // namespace rgbt
