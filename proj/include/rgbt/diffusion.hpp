#pragma once

#include <cmath>
#include <vector>

#include "rgbt/common.hpp"
#include "rgbt/rng.hpp"
#include "rgbt/schedule.hpp"
#include "rgbt/tensor.hpp"

namespace rgbt {

// Gaussian parameters of the reverse-step distribution q(y_{t-1} | y_t, y_0).
struct PosteriorParams {
    Tensor mu;
    double sigma_sq = 0;
};

enum class LossNorm { l1, l2 };

inline std::string to_string(LossNorm n) { return n == LossNorm::l1 ? "l1" : "l2"; }
inline LossNorm loss_norm_from_string(const std::string& s) {
    if (s == "l1") return LossNorm::l1;
    if (s == "l2") return LossNorm::l2;
    throw ConfigError("unknown loss norm: " + s);
}

enum class ReverseVariance { posterior, beta };

inline std::string to_string(ReverseVariance v) {
    return v == ReverseVariance::posterior ? "posterior" : "beta";
}
inline ReverseVariance reverse_variance_from_string(const std::string& s) {
    if (s == "posterior") return ReverseVariance::posterior;
    if (s == "beta") return ReverseVariance::beta;
    throw ConfigError("unknown reverse variance mode: " + s);
}

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}
}  // namespace detail

// Closed-form corruption: sqrt(gamma_t) y0 + sqrt(1 - gamma_t) eps.
inline Tensor q_sample(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& s) {
    detail::check_same_shape(y0, eps, "q_sample");
    s.check_t(t);
    const double g = s.gamma_at(t);
    const float a = static_cast<float>(std::sqrt(g));
    const float b = static_cast<float>(std::sqrt(1.0 - g));
    return add(affine(y0, a, 0.f), affine(eps, b, 0.f));
}

// Single forward kernel: sqrt(alpha_t) y_{t-1} + sqrt(1 - alpha_t) eps.
inline Tensor q_step(const Tensor& y_prev, int t, const Tensor& eps, const NoiseSchedule& s) {
    detail::check_same_shape(y_prev, eps, "q_step");
    s.check_t(t);
    const double a = s.alpha_at(t);
    return add(affine(y_prev, static_cast<float>(std::sqrt(a)), 0.f),
               affine(eps, static_cast<float>(std::sqrt(1.0 - a)), 0.f));
}

// Literal evaluation of the Gaussian posterior mean/variance, with the
// gamma_0 = 1 convention so t == 1 collapses to (y0, 0).
inline PosteriorParams posterior_params(const Tensor& y0, const Tensor& yt, int t,
                                        const NoiseSchedule& s) {
    detail::check_same_shape(y0, yt, "posterior_params");
    s.check_t(t);
    const double alpha = s.alpha_at(t);
    const double g_prev = s.gamma_at(t - 1);
    const double g = s.gamma_at(t);
    const double denom = 1.0 - g;
    const double c0 = std::sqrt(g_prev) * (1.0 - alpha) / denom;
    const double ct = std::sqrt(alpha) * (1.0 - g_prev) / denom;
    PosteriorParams p;
    p.mu = add(affine(y0, static_cast<float>(c0), 0.f), affine(yt, static_cast<float>(ct), 0.f));
    p.sigma_sq = (1.0 - g_prev) * (1.0 - alpha) / denom;
    return p;
}

// Inversion of q_sample: (y_t - sqrt(1 - gamma_t) eps_hat) / sqrt(gamma_t).
inline Tensor predict_y0(const Tensor& yt, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
    detail::check_same_shape(yt, eps_hat, "predict_y0");
    s.check_t(t);
    const double g = s.gamma_at(t);
    if (g < 1e-12) {
        throw NumericError("gamma_" + std::to_string(t) +
                           " below 1e-12; schedule too aggressive for T");
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(g));
    const float c = static_cast<float>(std::sqrt(1.0 - g) / std::sqrt(g));
    return sub(affine(yt, inv, 0.f), affine(eps_hat, c, 0.f));
}

// Noise-prediction loss for a batch. ts holds one timestep per sample.
// Model is anything exposing forward(x, y_t, ts) -> eps_hat.
template <class Model>
Tensor training_loss_batch(Model& model, const Tensor& x, const Tensor& y0,
                           const std::vector<int>& ts, const Tensor& eps, const NoiseSchedule& s,
                           LossNorm norm) {
    detail::check_same_shape(y0, eps, "training_loss");
    if (x.shape().size() != 4 || y0.shape().size() != 4 || x.shape()[0] != y0.shape()[0] ||
        x.shape()[2] != y0.shape()[2] || x.shape()[3] != y0.shape()[3]) {
        throw ShapeError("training_loss: source " + shape_str(x.shape()) +
                         " not aligned with target " + shape_str(y0.shape()));
    }
    const i64 N = x.shape()[0];
    if (static_cast<i64>(ts.size()) != N) {
        throw ShapeError("training_loss: got " + std::to_string(ts.size()) + " timesteps for " +
                         std::to_string(N) + " samples");
    }
    // y_t is an input to the network, not a differentiation path
    auto yt = Tensor::zeros(y0.shape());
    const i64 per = y0.numel() / N;
    for (i64 n = 0; n < N; ++n) {
        s.check_t(ts[n]);
        const double g = s.gamma_at(ts[n]);
        const float a = static_cast<float>(std::sqrt(g));
        const float b = static_cast<float>(std::sqrt(1.0 - g));
        const float* y0v = y0.data().data() + n * per;
        const float* ev = eps.data().data() + n * per;
        float* dst = yt.data().data() + n * per;
        for (i64 i = 0; i < per; ++i) dst[i] = a * y0v[i] + b * ev[i];
    }
    auto eps_hat = model.forward(x, yt, ts);
    auto diff = sub(eps_hat, eps);
    return norm == LossNorm::l2 ? mean(square(diff)) : mean(abs(diff));
}

// One reverse step. The estimated clean image is clipped to [-1, 1] before
// the posterior mean is formed; noise is added for every t except t == 1.
template <class Model>
Tensor p_sample_step(Model& model, const Tensor& x, const Tensor& yt, int t,
                     const NoiseSchedule& s, Rng& rng,
                     ReverseVariance var_mode = ReverseVariance::posterior) {
    s.check_t(t);
    auto eps_hat = model.forward(x, yt, std::vector<int>(x.shape()[0], t));
    auto y0_hat = clamp(predict_y0(yt, eps_hat, t, s), -1.f, 1.f);
    auto post = posterior_params(y0_hat, yt, t, s);
    if (t == 1) return post.mu;
    const double var = var_mode == ReverseVariance::posterior ? post.sigma_sq
                                                              : 1.0 - s.alpha_at(t);
    const float sigma = static_cast<float>(std::sqrt(var));
    auto out = post.mu;
    float* ov = out.data().data();
    for (i64 i = 0; i < out.numel(); ++i) ov[i] += sigma * static_cast<float>(rng.normal());
    return out;
}

struct SampleOptions {
    int target_channels = 1;
    ReverseVariance var_mode = ReverseVariance::posterior;
};

// Full ancestral sampler: y_T ~ N(0, I), then T reverse steps conditioned on
// the source image. Pure function of (weights, x, rng seed).
template <class Model>
Tensor sample(Model& model, const Tensor& x, const NoiseSchedule& s, Rng& rng,
              const SampleOptions& opts = {}) {
    NoGradGuard ng;
    if (x.shape().size() != 4) {
        throw ShapeError("sample expects x [N,3,H,W], got " + shape_str(x.shape()));
    }
    const i64 N = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    auto init_rng = rng.fork(0);
    auto y = Tensor::randn({N, opts.target_channels, H, W}, init_rng);
    for (int t = s.T(); t >= 1; --t) {
        auto step_rng = rng.fork(static_cast<std::uint64_t>(t));
        y = p_sample_step(model, x, y, t, s, step_rng, opts.var_mode);
    }
    return clamp(y, -1.f, 1.f);
}

}  // namespace rgbt
