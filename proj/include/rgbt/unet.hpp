#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rgbt/common.hpp"
#include "rgbt/rng.hpp"
#include "rgbt/tensor.hpp"

namespace rgbt {

// Architecture description. Weight shapes are a pure function of this struct.
struct UNetConfig {
    int in_channels_source = 3;
    int in_channels_target = 1;
    int base_channels = 64;
    std::vector<int> channel_mult = {1, 2, 2, 4};
    int res_blocks_per_level = 2;
    // Downsample factors at which self-attention runs. Factor 2^levels is the
    // bottleneck; factors 2^0 .. 2^(levels-1) are the encoder/decoder stages.
    std::set<int> attention_levels = {4, 8, 16};
    int heads = 4;
    int groupnorm_groups = 16;
    int time_embed_dim = 256;
    int image_size = 64;
    // Attention is quadratic in tokens; refuse configs beyond this rather
    // than degrade silently.
    i64 max_attention_tokens = 4096;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int width(int level) const { return base_channels * channel_mult[level]; }

    void validate() const {
        if (channel_mult.empty()) throw ConfigError("unet: channel_mult must be non-empty");
        if (base_channels < 1 || res_blocks_per_level < 1 || heads < 1 || groupnorm_groups < 1) {
            throw ConfigError("unet: channels, res blocks, heads and groups must be positive");
        }
        if (time_embed_dim % 2 != 0) throw ConfigError("unet: time_embed_dim must be even");
        if (base_channels % groupnorm_groups != 0) {
            throw ConfigError("unet: base_channels " + std::to_string(base_channels) +
                              " not divisible by groupnorm_groups " +
                              std::to_string(groupnorm_groups));
        }
        const int L = levels();
        for (int l = 0; l < L; ++l) {
            if (width(l) % heads != 0) {
                throw ConfigError("unet: level " + std::to_string(l) + " width " +
                                  std::to_string(width(l)) + " not divisible by heads " +
                                  std::to_string(heads));
            }
        }
        const int bottleneck = 1 << L;
        if (image_size % bottleneck != 0) {
            throw ConfigError("unet: image_size " + std::to_string(image_size) +
                              " not divisible by bottleneck factor " + std::to_string(bottleneck));
        }
        for (int f : attention_levels) {
            if (f < 1 || (f & (f - 1)) != 0 || f > bottleneck) {
                throw ConfigError("unet: attention factor " + std::to_string(f) +
                                  " must be a power of two <= " + std::to_string(bottleneck));
            }
            if (image_size % f != 0) {
                throw ConfigError("unet: attention factor " + std::to_string(f) +
                                  " does not divide image size " + std::to_string(image_size));
            }
            const i64 side = image_size / f;
            if (side * side > max_attention_tokens) {
                throw ConfigError("unet: attention at factor " + std::to_string(f) + " needs " +
                                  std::to_string(side * side) + " tokens, above the limit of " +
                                  std::to_string(max_attention_tokens) +
                                  " (raise max_attention_tokens to allow)");
            }
        }
    }

    bool operator==(const UNetConfig&) const = default;
};

// The paper's two ablation variants. Everything except the attention set is
// held equal so the comparison isolates attention placement.
enum class ModelVariant { I, II };

inline UNetConfig preset(ModelVariant variant, int image_size) {
    if (image_size % 16 != 0) {
        throw ConfigError("preset requires image_size divisible by 16, got " +
                          std::to_string(image_size));
    }
    UNetConfig cfg;
    cfg.image_size = image_size;
    cfg.attention_levels = variant == ModelVariant::I ? std::set<int>{4, 8, 16}
                                                      : std::set<int>{2, 4, 8, 16};
    cfg.validate();
    return cfg;
}

// Sinusoidal embedding with log-spaced frequencies; first half sin, second
// half cos, so t = 0 maps to (0...0, 1...1).
template <typename T>
TensorT<T> timestep_embedding(const std::vector<int>& ts, int dim, int /*T_max*/) {
    if (dim % 2 != 0) throw ConfigError("timestep embedding dim must be even");
    const int half = dim / 2;
    const i64 N = static_cast<i64>(ts.size());
    auto out = TensorT<T>::zeros({N, dim});
    T* ov = out.data().data();
    for (i64 n = 0; n < N; ++n) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            const double a = double(ts[n]) * freq;
            ov[n * dim + i] = static_cast<T>(std::sin(a));
            ov[n * dim + half + i] = static_cast<T>(std::cos(a));
        }
    }
    return out;
}

template <typename T>
TensorT<T> timestep_embedding(int t, int dim, int T_max) {
    auto e = timestep_embedding<T>(std::vector<int>{t}, dim, T_max);
    return reshape(e, {dim});
}

// Standalone multi-head self-attention over flattened spatial tokens:
// per-head scaled dot-product, output projection, residual addition.
template <typename T>
TensorT<T> self_attention(const TensorT<T>& x, int heads, const TensorT<T>& qkv_w,
                          const TensorT<T>& qkv_b, const TensorT<T>& proj_w,
                          const TensorT<T>& proj_b) {
    const auto& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("attention expects [N,C,H,W], got " + shape_str(xs));
    const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (C % heads != 0) {
        throw ShapeError("attention channels " + std::to_string(C) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const i64 dh = C / heads;
    const i64 Tn = H * W;
    auto qkv = conv2d(x, qkv_w, qkv_b, 1, 0);  // [N, 3C, H, W]
    auto flat = reshape(qkv, {N, 3 * C, Tn});
    auto q = reshape(slice(flat, 1, 0, C), {N, heads, dh, Tn});
    auto k = reshape(slice(flat, 1, C, C), {N, heads, dh, Tn});
    auto v = reshape(slice(flat, 1, 2 * C, C), {N, heads, dh, Tn});
    auto qt = permute(q, {0, 1, 3, 2});                       // [N, h, T, dh]
    auto scores = affine(matmul(qt, k),                       // [N, h, T, T]
                         static_cast<T>(1.0 / std::sqrt(double(dh))), T(0));
    auto attn = softmax(scores, 3);
    auto vt = permute(v, {0, 1, 3, 2});                       // [N, h, T, dh]
    auto mixed = permute(matmul(attn, vt), {0, 1, 3, 2});     // [N, h, dh, T]
    auto merged = reshape(mixed, {N, C, H, W});
    return add(x, conv2d(merged, proj_w, proj_b, 1, 0));
}

namespace nn {

template <typename T>
struct ConvLayer {
    TensorT<T> w, b;
    i64 stride = 1, pad = 1;
    TensorT<T> operator()(const TensorT<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LinearLayer {
    TensorT<T> w, b;  // w [in, out]
    TensorT<T> operator()(const TensorT<T>& x) const { return add(matmul(x, w), b); }
};

template <typename T>
struct GroupNormLayer {
    TensorT<T> scale, shift;
    i64 groups = 1;
    TensorT<T> operator()(const TensorT<T>& x) const {
        return group_norm(x, groups, 1e-5, scale, shift);
    }
};

// GroupNorm -> SiLU -> conv, time-conditioned scale/shift between the two
// convs, residual connection (1x1 projection when channels change).
template <typename T>
struct ResBlock {
    GroupNormLayer<T> gn1;
    ConvLayer<T> conv1;
    LinearLayer<T> emb;  // time_embed_dim -> 2 * out_channels
    GroupNormLayer<T> gn2;
    ConvLayer<T> conv2;
    std::optional<ConvLayer<T>> skip;
    i64 out_channels = 0;

    TensorT<T> operator()(const TensorT<T>& x, const TensorT<T>& temb) const {
        auto h = conv1(silu(gn1(x)));
        auto ss = emb(silu(temb));  // [N, 2C]
        const i64 N = ss.shape()[0];
        auto ss4 = reshape(ss, {N, 2 * out_channels, 1, 1});
        auto sc = slice(ss4, 1, 0, out_channels);
        auto sh = slice(ss4, 1, out_channels, out_channels);
        h = add(mul(gn2(h), affine(sc, T(1), T(1))), sh);
        h = conv2(silu(h));
        return add(skip ? (*skip)(x) : x, h);
    }
};

template <typename T>
struct AttnBlock {
    GroupNormLayer<T> gn;
    ConvLayer<T> qkv, proj;
    int heads = 1;
    int factor = 1;  // downsample factor this block runs at

    TensorT<T> operator()(const TensorT<T>& x) const {
        return self_attention(gn(x), heads, qkv.w, qkv.b, proj.w, proj.b);
    }
};

}  // namespace nn

struct AttentionPlacement {
    int factor;
    std::string location;
};

// Conditional denoiser eps_theta(x, y_t, t). The source image is concatenated
// with the noisy target on the channel axis at the input.
template <typename T>
class UNetT {
  public:
    using Tn = TensorT<T>;

    static UNetT build(const UNetConfig& cfg, Rng& rng) {
        cfg.validate();
        UNetT m;
        m.cfg_ = cfg;
        Rng r = rng.fork(0x756e6574);  // independent stream for init

        const int L = cfg.levels();
        const int R = cfg.res_blocks_per_level;
        const int td = cfg.time_embed_dim;

        m.temb_fc1_ = m.make_linear("temb.fc1", td, td, r);
        m.temb_fc2_ = m.make_linear("temb.fc2", td, td, r);
        m.stem_ = m.make_conv("stem.conv", cfg.in_channels_source + cfg.in_channels_target,
                              cfg.base_channels, 3, 1, 1, r);

        int w_in = cfg.base_channels;
        for (int l = 0; l < L; ++l) {
            const int w = cfg.width(l);
            const bool attn = cfg.attention_levels.count(1 << l) > 0;
            LevelBlocks enc;
            for (int i = 0; i < R; ++i) {
                const std::string p = "enc" + std::to_string(l) + ".res" + std::to_string(i);
                enc.res.push_back(m.make_res(p, i == 0 ? w_in : w, w, r));
                if (attn) {
                    const std::string ap = "enc" + std::to_string(l) + ".attn" + std::to_string(i);
                    enc.attn.push_back(m.make_attn(ap, w, 1 << l, r));
                }
            }
            m.enc_.push_back(std::move(enc));
            m.down_.push_back(m.make_conv("down" + std::to_string(l) + ".conv", w, w, 3, 2, 1, r));
            w_in = w;
        }

        const int wm = cfg.width(L - 1);
        m.mid_res0_ = m.make_res("mid.res0", wm, wm, r);
        if (cfg.attention_levels.count(1 << L) > 0) {
            m.mid_attn_ = m.make_attn("mid.attn", wm, 1 << L, r);
        }
        m.mid_res1_ = m.make_res("mid.res1", wm, wm, r);

        int w_up = wm;
        m.dec_.resize(L);
        m.up_.resize(L);
        for (int l = L - 1; l >= 0; --l) {
            const int w = cfg.width(l);
            const bool attn = cfg.attention_levels.count(1 << l) > 0;
            m.up_[l] = m.make_conv("up" + std::to_string(l) + ".conv", w_up, w_up, 3, 1, 1, r);
            LevelBlocks dec;
            for (int i = 0; i < R; ++i) {
                const std::string p = "dec" + std::to_string(l) + ".res" + std::to_string(i);
                dec.res.push_back(m.make_res(p, (i == 0 ? w_up : w) + w, w, r));
                if (attn) {
                    const std::string ap = "dec" + std::to_string(l) + ".attn" + std::to_string(i);
                    dec.attn.push_back(m.make_attn(ap, w, 1 << l, r));
                }
            }
            m.dec_[l] = std::move(dec);
            w_up = w;
        }

        m.out_gn_ = m.make_gn("out.gn", cfg.width(0), r);
        // zero-init so an untrained model predicts zero noise
        m.out_conv_ = m.make_conv("out.conv", cfg.width(0), cfg.in_channels_target, 3, 1, 1, r,
                                  /*zero_init=*/true);
        return m;
    }

    const UNetConfig& config() const { return cfg_; }

    Tn forward(const Tn& x, const Tn& yt, const std::vector<int>& ts) const {
        const auto& xs = x.shape();
        const auto& ys = yt.shape();
        if (xs.size() != 4 || ys.size() != 4 || xs[0] != ys[0] || xs[2] != ys[2] ||
            xs[3] != ys[3]) {
            throw ShapeError("unet: source " + shape_str(xs) + " and target " + shape_str(ys) +
                             " must be spatially aligned");
        }
        if (xs[1] != cfg_.in_channels_source || ys[1] != cfg_.in_channels_target) {
            throw ShapeError("unet: expected " + std::to_string(cfg_.in_channels_source) + "+" +
                             std::to_string(cfg_.in_channels_target) + " channels, got " +
                             shape_str(xs) + " and " + shape_str(ys));
        }
        const int L = cfg_.levels();
        if (xs[2] % (1 << L) != 0 || xs[3] % (1 << L) != 0) {
            throw ShapeError("unet: spatial extents of " + shape_str(xs) +
                             " not divisible by 2^levels");
        }
        if (static_cast<i64>(ts.size()) != xs[0]) {
            throw ShapeError("unet: got " + std::to_string(ts.size()) + " timesteps for batch " +
                             std::to_string(xs[0]));
        }

        auto temb = temb_fc2_(silu(temb_fc1_(timestep_embedding<T>(ts, cfg_.time_embed_dim, 0))));
        auto h = stem_(concat<T>({x, yt}, 1));
        std::vector<Tn> skips;
        for (int l = 0; l < L; ++l) {
            for (size_t i = 0; i < enc_[l].res.size(); ++i) {
                h = enc_[l].res[i](h, temb);
                if (!enc_[l].attn.empty()) h = enc_[l].attn[i](h);
                skips.push_back(h);
            }
            h = down_[l](h);
        }
        h = mid_res0_(h, temb);
        if (mid_attn_) h = (*mid_attn_)(h);
        h = mid_res1_(h, temb);
        for (int l = L - 1; l >= 0; --l) {
            h = resample(h, ResampleDir::up);
            h = up_[l](h);
            for (size_t i = 0; i < dec_[l].res.size(); ++i) {
                h = dec_[l].res[i](concat<T>({h, skips.back()}, 1), temb);
                skips.pop_back();
                if (!dec_[l].attn.empty()) h = dec_[l].attn[i](h);
            }
        }
        return out_conv_(silu(out_gn_(h)));
    }

    Tn forward(const Tn& x, const Tn& yt, int t) const {
        return forward(x, yt, std::vector<int>(x.shape()[0], t));
    }

    // Canonical (name, tensor) list in creation order.
    std::vector<std::pair<std::string, Tn>>& params() { return params_; }
    const std::vector<std::pair<std::string, Tn>>& params() const { return params_; }

    i64 parameter_count() const {
        i64 n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Downsample factor of every attention block, for the placement audit.
    std::vector<AttentionPlacement> attention_placements() const {
        std::vector<AttentionPlacement> out;
        auto add_level = [&](const std::vector<LevelBlocks>& side, const char* tag) {
            for (size_t l = 0; l < side.size(); ++l) {
                for (size_t i = 0; i < side[l].attn.size(); ++i) {
                    out.push_back({side[l].attn[i].factor, std::string(tag) + std::to_string(l) +
                                                               ".attn" + std::to_string(i)});
                }
            }
        };
        add_level(enc_, "enc");
        if (mid_attn_) out.push_back({mid_attn_->factor, "mid.attn"});
        add_level(dec_, "dec");
        return out;
    }

    bool has_attention_at(int factor) const {
        for (const auto& p : attention_placements())
            if (p.factor == factor) return true;
        return false;
    }

    std::vector<std::pair<std::string, std::vector<T>>> export_weights() const {
        std::vector<std::pair<std::string, std::vector<T>>> out;
        out.reserve(params_.size());
        for (const auto& [name, t] : params_) {
            out.emplace_back(name, std::vector<T>(t.data().begin(), t.data().end()));
        }
        return out;
    }

    // Named-shape table comparison; throws ConfigError on any mismatch.
    void load_weights(const std::vector<std::pair<std::string, std::vector<T>>>& named) {
        if (named.size() != params_.size()) {
            throw ConfigError("weight count mismatch: model has " +
                              std::to_string(params_.size()) + " arrays, checkpoint has " +
                              std::to_string(named.size()));
        }
        std::map<std::string, const std::vector<T>*> by_name;
        for (const auto& [n, v] : named) by_name[n] = &v;
        for (auto& [name, t] : params_) {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw ConfigError("checkpoint missing weight array " + name);
            if (static_cast<i64>(it->second->size()) != t.numel()) {
                throw ConfigError("weight " + name + " has " +
                                  std::to_string(it->second->size()) + " values, expected " +
                                  std::to_string(t.numel()));
            }
            std::copy(it->second->begin(), it->second->end(), t.data().begin());
        }
    }

  private:
    struct LevelBlocks {
        std::vector<nn::ResBlock<T>> res;
        std::vector<nn::AttnBlock<T>> attn;  // empty or one per res block
    };

    Tn reg(const std::string& name, Tn t) {
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    nn::ConvLayer<T> make_conv(const std::string& name, int cin, int cout, int k, i64 stride,
                               i64 pad, Rng& r, bool zero_init = false) {
        nn::ConvLayer<T> c;
        c.stride = stride;
        c.pad = pad;
        c.w = reg(name + ".w", zero_init
                                   ? Tn::zeros({cout, cin, k, k})
                                   : kaiming_uniform<T>({cout, cin, k, k}, i64(cin) * k * k, r));
        c.b = reg(name + ".b", Tn::zeros({cout}));
        return c;
    }

    nn::LinearLayer<T> make_linear(const std::string& name, int in, int out, Rng& r) {
        nn::LinearLayer<T> l;
        l.w = reg(name + ".w", kaiming_uniform<T>({in, out}, in, r));
        l.b = reg(name + ".b", Tn::zeros({out}));
        return l;
    }

    nn::GroupNormLayer<T> make_gn(const std::string& name, int channels, Rng&) {
        nn::GroupNormLayer<T> g;
        g.groups = cfg_.groupnorm_groups;
        g.scale = reg(name + ".w", Tn::ones({channels}));
        g.shift = reg(name + ".b", Tn::zeros({channels}));
        return g;
    }

    nn::ResBlock<T> make_res(const std::string& p, int cin, int cout, Rng& r) {
        nn::ResBlock<T> b;
        b.out_channels = cout;
        b.gn1 = make_gn(p + ".gn1", cin, r);
        b.conv1 = make_conv(p + ".conv1", cin, cout, 3, 1, 1, r);
        b.emb = make_linear(p + ".emb", cfg_.time_embed_dim, 2 * cout, r);
        b.gn2 = make_gn(p + ".gn2", cout, r);
        b.conv2 = make_conv(p + ".conv2", cout, cout, 3, 1, 1, r);
        if (cin != cout) b.skip = make_conv(p + ".skip", cin, cout, 1, 1, 0, r);
        return b;
    }

    nn::AttnBlock<T> make_attn(const std::string& p, int channels, int factor, Rng& r) {
        nn::AttnBlock<T> a;
        a.heads = cfg_.heads;
        a.factor = factor;
        a.gn = make_gn(p + ".gn", channels, r);
        a.qkv = make_conv(p + ".qkv", channels, 3 * channels, 1, 1, 0, r);
        a.proj = make_conv(p + ".proj", channels, channels, 1, 1, 0, r);
        return a;
    }

    UNetConfig cfg_;
    std::vector<std::pair<std::string, Tn>> params_;

    nn::LinearLayer<T> temb_fc1_, temb_fc2_;
    nn::ConvLayer<T> stem_;
    std::vector<LevelBlocks> enc_;
    std::vector<nn::ConvLayer<T>> down_;
    nn::ResBlock<T> mid_res0_, mid_res1_;
    std::optional<nn::AttnBlock<T>> mid_attn_;
    std::vector<nn::ConvLayer<T>> up_;
    std::vector<LevelBlocks> dec_;
    nn::GroupNormLayer<T> out_gn_;
    nn::ConvLayer<T> out_conv_;
};

using UNet = UNetT<float>;

template <typename T>
UNetT<T> build_unet(const UNetConfig& cfg, Rng& rng) {
    return UNetT<T>::build(cfg, rng);
}

inline UNet build_unet(const UNetConfig& cfg, Rng& rng) { return UNet::build(cfg, rng); }

}  // namespace rgbt
