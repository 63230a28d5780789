#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "rgbt/diffusion.hpp"
#include "rgbt/schedule.hpp"
#include "rgbt/unet.hpp"

using namespace rgbt;

namespace {

// Model stand-ins for exercising the reverse process without training.
struct ConstEpsModel {
    Tensor eps;
    Tensor forward(const Tensor&, const Tensor&, const std::vector<int>&) const { return eps; }
};

struct ZeroModel {
    Tensor forward(const Tensor&, const Tensor& yt, const std::vector<int>&) const {
        return Tensor::zeros(yt.shape());
    }
};

}  // namespace

TEST_CASE("schedule single step") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 1, 0.1, 0.1);
    CHECK(s.alpha_at(1) == Catch::Approx(0.9).epsilon(1e-12));
    CHECK(s.gamma_at(1) == Catch::Approx(0.9).epsilon(1e-12));
    CHECK(s.gamma_at(0) == 1.0);
}

TEST_CASE("linear schedule gamma decays below 1e-4 at T=1000") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 1000, 1e-4, 0.02);
    // independent direct-product computation
    double g = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * double(t - 1) / 999.0;
        g *= 1.0 - beta;
    }
    CHECK(s.gamma_at(1000) == Catch::Approx(g).epsilon(1e-10));
    CHECK(s.gamma_at(1000) < 1e-4);
}

TEST_CASE("schedule product identity holds to 1e-12") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        auto s = NoiseSchedule::make(kind, 100, 1e-4, 0.02);
        double prev = 1.0;
        for (int t = 1; t <= 100; ++t) {
            CHECK(std::abs(s.gamma_at(t) - prev * s.alpha_at(t)) <= 1e-12);
            CHECK(s.gamma_at(t) < prev);  // strictly decreasing
            CHECK(s.alpha_at(t) > 0.0);
            CHECK(s.alpha_at(t) < 1.0);
            prev = s.gamma_at(t);
        }
        CHECK(s.gamma_at(100) > 0.0);
    }
}

TEST_CASE("schedule rejects invalid beta ranges") {
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 10, 0.5, 0.2), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 10, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(ScheduleKind::linear, 0, 1e-4, 0.02), ConfigError);
}

TEST_CASE("q_sample noiseless and near-zero-noise limits") {
    Rng rng(1);
    auto y0 = Tensor::randn({1, 1, 4, 4}, rng);
    auto zero = Tensor::zeros(y0.shape());

    auto s = NoiseSchedule::make(ScheduleKind::linear, 5, 0.1, 0.3);
    auto yt = q_sample(y0, 3, zero, s);
    const float a = static_cast<float>(std::sqrt(s.gamma_at(3)));
    for (i64 i = 0; i < y0.numel(); ++i)
        CHECK(yt.data()[i] == Catch::Approx(a * y0.data()[i]).margin(1e-7));

    // gamma ~ 1: output ~ y0
    auto s1 = NoiseSchedule::make(ScheduleKind::linear, 1, 1e-12, 1e-12);
    auto eps = Tensor::randn(y0.shape(), rng);
    auto y1 = q_sample(y0, 1, eps, s1);
    for (i64 i = 0; i < y0.numel(); ++i)
        CHECK(y1.data()[i] == Catch::Approx(y0.data()[i]).margin(1e-5));
}

TEST_CASE("q_sample validates shapes and range") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 5, 0.1, 0.3);
    auto y0 = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(q_sample(y0, 3, Tensor::zeros({2, 3}), s), ShapeError);
    CHECK_THROWS_AS(q_sample(y0, 0, Tensor::zeros({2, 2}), s), ShapeError);
    CHECK_THROWS_AS(q_sample(y0, 6, Tensor::zeros({2, 2}), s), ShapeError);
}

TEST_CASE("q_sample Monte-Carlo moments match closed form") {
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 10, 1e-4, 0.02);
    const int t = 5;
    const i64 n_elem = 16;
    auto y0 = Tensor::filled({n_elem}, 0.3f);
    Rng rng(2024);
    const int draws = 100000;
    std::vector<double> sum(n_elem, 0.0), sum_sq(n_elem, 0.0);
    for (int d = 0; d < draws; ++d) {
        auto eps = Tensor::randn({n_elem}, rng);
        auto yt = q_sample(y0, t, eps, s);
        for (i64 i = 0; i < n_elem; ++i) {
            sum[i] += yt.data()[i];
            sum_sq[i] += double(yt.data()[i]) * yt.data()[i];
        }
    }
    const double g = s.gamma_at(t);
    const double want_mean = std::sqrt(g) * 0.3;
    const double want_var = 1.0 - g;
    const double band = 3.0 * std::sqrt(want_var / draws);  // 3 sigma on the mean
    double pooled_var = 0;
    for (i64 i = 0; i < n_elem; ++i) {
        const double m = sum[i] / draws;
        CHECK(std::abs(m - want_mean) < band);
        pooled_var += sum_sq[i] / draws - m * m;
    }
    pooled_var /= n_elem;
    CHECK(std::abs(pooled_var - want_var) / want_var < 0.02);
}

TEST_CASE("q_step arithmetic and no-noise limit") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 1, 0.19, 0.19);  // alpha = 0.81
    auto y = Tensor::ones({4});
    auto yt = q_step(y, 1, Tensor::zeros({4}), s);
    for (float v : yt.data()) CHECK(v == Catch::Approx(0.9).margin(1e-7));

    auto s1 = NoiseSchedule::make(ScheduleKind::linear, 1, 1e-12, 1e-12);
    Rng rng(3);
    auto eps = Tensor::randn({4}, rng);
    auto y1 = q_step(y, 1, eps, s1);
    for (float v : y1.data()) CHECK(v == Catch::Approx(1.0).margin(1e-5));
}

TEST_CASE("chained q_step matches q_sample marginal variance") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 8, 0.05, 0.3);
    const int t = 8;
    const i64 n_elem = 8;
    auto y0 = Tensor::filled({n_elem}, -0.4f);
    Rng rng(71);
    const int draws = 20000;
    double sum = 0, sum_sq = 0;
    for (int d = 0; d < draws; ++d) {
        auto y = y0;
        for (int i = 1; i <= t; ++i) {
            auto eps = Tensor::randn({n_elem}, rng);
            y = q_step(y, i, eps, s);
        }
        for (i64 i = 0; i < n_elem; ++i) {
            sum += y.data()[i];
            sum_sq += double(y.data()[i]) * y.data()[i];
        }
    }
    const double n = double(draws) * n_elem;
    const double m = sum / n;
    const double var = sum_sq / n - m * m;
    const double g = s.gamma_at(t);
    CHECK(std::abs(m - std::sqrt(g) * -0.4) < 3.0 * std::sqrt((1.0 - g) / n));
    CHECK(std::abs(var - (1.0 - g)) / (1.0 - g) < 0.03);
}

TEST_CASE("posterior collapses to (y0, 0) at t=1") {
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 20, 1e-4, 0.02);
    Rng rng(5);
    auto y0 = Tensor::randn({2, 3}, rng);
    auto yt = Tensor::randn({2, 3}, rng);
    auto p = posterior_params(y0, yt, 1, s);
    CHECK(p.sigma_sq == 0.0);
    CHECK(std::memcmp(p.mu.data().data(), y0.data().data(), sizeof(float) * y0.numel()) == 0);
}

TEST_CASE("posterior coefficient sum: exact at t=1, not an identity elsewhere") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 10, 0.05, 0.3);
    // s(t) = sqrt(g_{t-1})(1-a_t) + sqrt(a_t)(1-g_{t-1}) vs 1 - g_t
    auto coeff_sum = [&](int t) {
        return std::sqrt(s.gamma_at(t - 1)) * (1.0 - s.alpha_at(t)) +
               std::sqrt(s.alpha_at(t)) * (1.0 - s.gamma_at(t - 1));
    };
    CHECK(std::abs(coeff_sum(1) - (1.0 - s.gamma_at(1))) < 1e-15);
    // the literal equations do not preserve constants for t >= 2
    double max_dev = 0;
    for (int t = 2; t <= 10; ++t) {
        max_dev = std::max(max_dev, std::abs(coeff_sum(t) - (1.0 - s.gamma_at(t))));
    }
    CHECK(max_dev > 1e-6);
}

TEST_CASE("posterior matches independent scalar evaluation") {
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 30, 1e-4, 0.02);
    Rng rng(9);
    for (int t : {2, 7, 15, 30}) {
        auto y0 = Tensor::randn({3, 3}, rng);
        auto yt = Tensor::randn({3, 3}, rng);
        auto p = posterior_params(y0, yt, t, s);
        const double a = s.alpha_at(t), gp = s.gamma_at(t - 1), g = s.gamma_at(t);
        for (i64 i = 0; i < y0.numel(); ++i) {
            const double mu = std::sqrt(gp) * (1 - a) / (1 - g) * y0.data()[i] +
                              std::sqrt(a) * (1 - gp) / (1 - g) * yt.data()[i];
            CHECK(p.mu.data()[i] == Catch::Approx(mu).margin(1e-6));
        }
        const double var = (1 - gp) * (1 - a) / (1 - g);
        CHECK(p.sigma_sq == Catch::Approx(var).epsilon(1e-12));
    }
}

TEST_CASE("predict_y0 inverts q_sample") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 20, 1e-3, 0.1);
    Rng rng(11);
    auto y0 = Tensor::randn({2, 1, 4, 4}, rng);
    for (int t : {1, 7, 20}) {
        auto eps = Tensor::randn(y0.shape(), rng);
        auto yt = q_sample(y0, t, eps, s);
        auto rec = predict_y0(yt, eps, t, s);
        for (i64 i = 0; i < y0.numel(); ++i)
            CHECK(rec.data()[i] == Catch::Approx(y0.data()[i]).margin(1e-5));
        // round trip the other way
        auto yt2 = q_sample(rec, t, eps, s);
        for (i64 i = 0; i < y0.numel(); ++i)
            CHECK(yt2.data()[i] == Catch::Approx(yt.data()[i]).margin(1e-5));
    }
    // eps_hat = 0 divides out the signal scaling
    auto yt = q_sample(y0, 5, Tensor::randn(y0.shape(), rng), s);
    auto rec = predict_y0(yt, Tensor::zeros(y0.shape()), 5, s);
    const float inv = static_cast<float>(1.0 / std::sqrt(s.gamma_at(5)));
    for (i64 i = 0; i < y0.numel(); ++i)
        CHECK(rec.data()[i] == Catch::Approx(inv * yt.data()[i]).margin(1e-5));
}

TEST_CASE("predict_y0 flags vanishing gamma") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 40, 0.9, 0.99);
    auto y = Tensor::zeros({2});
    CHECK_THROWS_AS(predict_y0(y, y, 40, s), NumericError);
}

TEST_CASE("training loss: perfect predictor and zero predictor") {
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 50, 1e-4, 0.02);
    Rng rng(13);
    auto x = Tensor::randn({4, 3, 8, 8}, rng);
    auto y0 = Tensor::uniform({4, 1, 8, 8}, rng, -1, 1);
    auto eps = Tensor::randn({4, 1, 8, 8}, rng);
    std::vector<int> ts = {3, 17, 29, 44};

    ConstEpsModel perfect{eps};
    auto l0 = training_loss_batch(perfect, x, y0, ts, eps, s, LossNorm::l2);
    CHECK(l0.item() == 0.0f);

    ZeroModel zero;
    auto l1 = training_loss_batch(zero, x, y0, ts, eps, s, LossNorm::l2);
    // E[eps^2] = 1 over 4x1x8x8 = 1024 draws
    CHECK(l1.item() > 0.8f);
    CHECK(l1.item() < 1.2f);

    auto l1_l1 = training_loss_batch(zero, x, y0, ts, eps, s, LossNorm::l1);
    // E|eps| = sqrt(2/pi) ~ 0.798
    CHECK(l1_l1.item() > 0.65f);
    CHECK(l1_l1.item() < 0.95f);
}

TEST_CASE("training loss rejects misaligned source/target") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 5, 0.1, 0.2);
    ZeroModel zero;
    auto x = Tensor::zeros({2, 3, 8, 8});
    auto y0 = Tensor::zeros({2, 1, 4, 4});
    auto eps = Tensor::zeros({2, 1, 4, 4});
    CHECK_THROWS_AS(training_loss_batch(zero, x, y0, {1, 2}, eps, s, LossNorm::l2), ShapeError);
}

TEST_CASE("p_sample_step adds no noise at t=1 and is seed-deterministic") {
    auto s = NoiseSchedule::make(ScheduleKind::cosine, 10, 1e-4, 0.02);
    Rng rng(17);
    auto x = Tensor::randn({1, 3, 4, 4}, rng);
    auto yt = Tensor::randn({1, 1, 4, 4}, rng);
    ZeroModel zero;

    Rng r1(100), r2(999);
    auto a = p_sample_step(zero, x, yt, 1, s, r1);
    auto b = p_sample_step(zero, x, yt, 1, s, r2);
    CHECK(std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.numel()) == 0);

    Rng r3(5), r4(5);
    auto c = p_sample_step(zero, x, yt, 7, s, r3);
    auto d = p_sample_step(zero, x, yt, 7, s, r4);
    CHECK(std::memcmp(c.data().data(), d.data().data(), sizeof(float) * c.numel()) == 0);
    // and differs for a different seed at t > 1
    Rng r5(6);
    auto e = p_sample_step(zero, x, yt, 7, s, r5);
    CHECK(std::memcmp(c.data().data(), e.data().data(), sizeof(float) * c.numel()) != 0);
}

TEST_CASE("reverse variance switch changes the noise scale") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 10, 0.05, 0.3);
    Rng rng(41);
    auto x = Tensor::randn({1, 3, 4, 4}, rng);
    auto yt = Tensor::randn({1, 1, 4, 4}, rng);
    ZeroModel zero;
    const int t = 5;
    // per-mode variance over repeated draws matches sigma^2(mode)
    auto measure = [&](ReverseVariance mode) {
        double s1 = 0, s2 = 0;
        const int trials = 4000;
        for (int i = 0; i < trials; ++i) {
            Rng r = Rng(99).fork(i);
            auto out = p_sample_step(zero, x, yt, t, s, r, mode);
            s1 += out.data()[0];
            s2 += double(out.data()[0]) * out.data()[0];
        }
        const double m = s1 / trials;
        return s2 / trials - m * m;
    };
    auto post = posterior_params(clamp(predict_y0(yt, Tensor::zeros(yt.shape()), t, s), -1.f, 1.f),
                                 yt, t, s);
    const double v_post = measure(ReverseVariance::posterior);
    const double v_beta = measure(ReverseVariance::beta);
    CHECK(std::abs(v_post - post.sigma_sq) / post.sigma_sq < 0.15);
    CHECK(std::abs(v_beta - (1.0 - s.alpha_at(t))) / (1.0 - s.alpha_at(t)) < 0.15);
    CHECK(v_beta > v_post);  // beta variance exceeds the posterior variance
}

TEST_CASE("p_sample_step with oracle noise matches posterior moments") {
    auto s = NoiseSchedule::make(ScheduleKind::linear, 10, 0.02, 0.2);
    const int t = 6;
    Rng rng(23);
    auto x = Tensor::randn({1, 3, 2, 2}, rng);
    auto y0 = Tensor::uniform({1, 1, 2, 2}, rng, -0.8, 0.8);
    auto eps = Tensor::randn(y0.shape(), rng);
    auto yt = q_sample(y0, t, eps, s);
    ConstEpsModel oracle_model{eps};

    auto want = posterior_params(y0, yt, t, s);
    const int trials = 10000;
    std::vector<double> sum(4, 0), sum_sq(4, 0);
    for (int i = 0; i < trials; ++i) {
        Rng r = Rng(1000).fork(i);
        auto out = p_sample_step(oracle_model, x, yt, t, s, r);
        for (i64 k = 0; k < 4; ++k) {
            sum[k] += out.data()[k];
            sum_sq[k] += double(out.data()[k]) * out.data()[k];
        }
    }
    double pooled_var = 0;
    for (i64 k = 0; k < 4; ++k) {
        const double m = sum[k] / trials;
        CHECK(std::abs(m - want.mu.data()[k]) < 4.0 * std::sqrt(want.sigma_sq / trials));
        pooled_var += sum_sq[k] / trials - m * m;
    }
    pooled_var /= 4;
    CHECK(std::abs(pooled_var - want.sigma_sq) / want.sigma_sq < 0.05);
}

TEST_CASE("sample: shape, determinism, output range") {
    UNetConfig cfg;
    cfg.base_channels = 8;
    cfg.channel_mult = {1};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {2};
    cfg.heads = 2;
    cfg.groupnorm_groups = 2;
    cfg.time_embed_dim = 8;
    cfg.image_size = 8;
    Rng wr(31);
    auto model = build_unet(cfg, wr);
    // give the zero-init head some signal
    Rng pr(32);
    for (auto& [name, t] : model.params()) {
        if (name == "out.conv.w")
            for (float& v : t.data()) v = static_cast<float>(pr.normal()) * 0.05f;
    }

    auto s = NoiseSchedule::make(ScheduleKind::cosine, 5, 1e-4, 0.02);
    Rng dr(33);
    auto x = Tensor::uniform({2, 3, 8, 8}, dr, -1, 1);

    Rng s1(7), s2(7), s3(8);
    auto a = sample(model, x, s, s1);
    REQUIRE(a.shape() == Shape{2, 1, 8, 8});
    auto b = sample(model, x, s, s2);
    CHECK(std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.numel()) == 0);
    auto c = sample(model, x, s, s3);
    CHECK(std::memcmp(a.data().data(), c.data().data(), sizeof(float) * a.numel()) != 0);
    for (float v : a.data()) {
        CHECK(v >= -1.f);
        CHECK(v <= 1.f);
    }
}
