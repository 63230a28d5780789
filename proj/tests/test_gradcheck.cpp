#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "rgbt/diffusion.hpp"
#include "rgbt/tensor.hpp"
#include "rgbt/unet.hpp"

using namespace rgbt;

namespace {

// Checks analytic gradients against central differences for every tensor in
// `inputs`. The scalar loss is a random weighted sum of the op output; the FD
// reference accumulates that sum in double so the comparison is not limited
// by float32 rounding of the loss value itself. Inputs are <= 64 elements.
template <typename T>
void check_op(const std::string& what, std::vector<TensorT<T>> inputs,
              std::function<TensorT<T>()> make_out, double h, double tol,
              double rel_floor = 0.05) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    auto out = make_out();
    Rng wr(fnv1a64(what));
    auto weights = TensorT<T>::randn(out.shape(), wr);
    sum(mul(out, weights)).backward();
    auto loss_fn = [&]() {
        NoGradGuard ng;
        auto o = make_out();
        double acc = 0;
        for (i64 i = 0; i < o.numel(); ++i)
            acc += static_cast<double>(o.data()[i]) * static_cast<double>(weights.data()[i]);
        return acc;
    };
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto r = oracle::fd_check(inputs[i], loss_fn, h, rel_floor);
        INFO(what << ", input " << i << " (" << r.checked << " coords)");
        CHECK(r.checked > 0);
        CHECK(r.max_rel_err < tol);
    }
}

template <typename T>
void run_op_suite(double h, double tol) {
    Rng rng(1234);
    using Tn = TensorT<T>;

    {
        auto a = Tn::randn({3, 4}, rng), b = Tn::randn({3, 4}, rng);
        check_op<T>("add", {a, b}, [=] { return add(a, b); }, h, tol);
        check_op<T>("sub", {a, b}, [=] { return sub(a, b); }, h, tol);
        check_op<T>("mul", {a, b}, [=] { return mul(a, b); }, h, tol);
    }
    {
        auto a = Tn::randn({2, 3}, rng);
        auto b = Tn::uniform({2, 3}, rng, 0.5, 2.0);  // keep denominators away from 0
        check_op<T>("div", {a, b}, [=] { return div(a, b); }, h, tol);
    }
    {
        // broadcast paths: [2,1,4] x [3,1], [C,1,1] x [N,C,H,W]
        auto a = Tn::randn({2, 1, 4}, rng), b = Tn::randn({3, 1}, rng);
        check_op<T>("mul bcast", {a, b}, [=] { return mul(a, b); }, h, tol);
        auto x = Tn::randn({2, 3, 2, 2}, rng), c = Tn::randn({3, 1, 1}, rng);
        check_op<T>("add bcast", {x, c}, [=] { return add(x, c); }, h, tol);
    }
    {
        auto a = Tn::randn({4, 4}, rng);
        check_op<T>("silu", {a}, [=] { return silu(a); }, h, tol);
        check_op<T>("sigmoid", {a}, [=] { return sigmoid(a); }, h, tol);
        check_op<T>("square", {a}, [=] { return square(a); }, h, tol);
        check_op<T>("affine", {a}, [=] { return affine(a, T(1.7), T(-0.3)); }, h, tol);
    }
    {
        // abs away from the kink, clamp strictly inside the box
        auto pos = Tn::uniform({3, 3}, rng, 0.5, 1.5);
        auto neg = Tn::uniform({3, 3}, rng, -1.5, -0.5);
        check_op<T>("abs+", {pos}, [=] { return abs(pos); }, h, tol);
        check_op<T>("abs-", {neg}, [=] { return abs(neg); }, h, tol);
        auto mid = Tn::uniform({3, 3}, rng, -0.5, 0.5);
        check_op<T>("clamp", {mid}, [=] { return clamp(mid, T(-1), T(1)); }, h, tol);
    }
    // matmul and conv are multilinear: the central-difference truncation term
    // vanishes, so a larger step only reduces float32 rounding noise
    const double hl = 10 * h;
    {
        auto a = Tn::randn({4, 3}, rng), b = Tn::randn({3, 5}, rng);
        check_op<T>("matmul", {a, b}, [=] { return matmul(a, b); }, hl, tol);
        auto ba = Tn::randn({2, 2, 3, 2}, rng), bb = Tn::randn({2, 2, 4}, rng);
        check_op<T>("matmul batched+bcast", {ba, bb}, [=] { return matmul(ba, bb); }, hl, tol);
    }
    {
        auto x = Tn::randn({1, 2, 4, 4}, rng);
        auto w = Tn::randn({2, 2, 3, 3}, rng);
        auto b = Tn::randn({2}, rng);
        check_op<T>("conv2d s1", {x, w, b}, [=] { return conv2d(x, w, b, 1, 1); }, hl, tol);
        check_op<T>("conv2d s2", {x, w, b}, [=] { return conv2d(x, w, b, 2, 1); }, hl, tol);
        auto w1 = Tn::randn({3, 2, 1, 1}, rng);
        check_op<T>("conv2d 1x1", {x, w1}, [=] { return conv2d(x, w1, Tn(), 1, 0); }, hl, tol);
    }
    {
        auto x = Tn::randn({2, 4, 2, 2}, rng);
        auto sc = Tn::uniform({4}, rng, 0.5, 1.5);
        auto sh = Tn::randn({4}, rng);
        // normalization statistics make the float32 FD noisier; a slightly
        // larger step stays far below the curvature scale
        check_op<T>("group_norm", {x, sc, sh},
                    [=] { return group_norm(x, 2, 1e-5, sc, sh); }, 3 * h, tol);
    }
    {
        auto x = Tn::randn({2, 3, 4}, rng);
        check_op<T>("softmax", {x}, [=] { return softmax(x, 2); }, h, tol);
        check_op<T>("softmax axis1", {x}, [=] { return softmax(x, 1); }, h, tol);
    }
    {
        auto x = Tn::randn({1, 2, 4, 4}, rng);
        check_op<T>("resample down", {x}, [=] { return resample(x, ResampleDir::down); }, h, tol);
        auto y = Tn::randn({1, 2, 2, 2}, rng);
        check_op<T>("resample up", {y}, [=] { return resample(y, ResampleDir::up); }, h, tol);
    }
    {
        auto x = Tn::randn({2, 3, 2}, rng);
        check_op<T>("reshape", {x}, [=] { return reshape(x, {6, 2}); }, h, tol);
        check_op<T>("permute", {x}, [=] { return permute(x, {2, 0, 1}); }, h, tol);
        check_op<T>("slice", {x}, [=] { return slice(x, 1, 1, 2); }, h, tol);
        auto y = Tn::randn({2, 2, 2}, rng);
        check_op<T>("concat", {x, y}, [=] { return concat<T>({x, y}, 1); }, h, tol);
    }
    {
        // reductions already yield scalars; the weighted sum wrapper still works
        auto x = Tn::randn({3, 3}, rng);
        check_op<T>("mean of square", {x}, [=] { return mean(square(x)); }, h, tol);
        check_op<T>("sum of mul", {x}, [=] { return sum(mul(x, x)); }, h, tol);
    }
    {
        // composite op chain at the base step size
        auto x = Tn::randn({4, 3}, rng);
        auto w = Tn::randn({3, 4}, rng);
        auto b = Tn::randn({4}, rng);
        check_op<T>("chain matmul+silu+square", {x, w, b},
                    [=] { return square(silu(add(matmul(x, w), b))); }, h, tol);
    }
}

}  // namespace

TEST_CASE("per-op finite differences, float32 at h=1e-3") {
    run_op_suite<float>(1e-3, 1e-3);
}

TEST_CASE("per-op finite differences, float64 tightened") {
    run_op_suite<double>(1e-5, 1e-6);
}

TEST_CASE("end-to-end training loss gradients on a probe model") {
    UNetConfig cfg;
    cfg.base_channels = 8;
    cfg.channel_mult = {1};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {1, 2};
    cfg.heads = 2;
    cfg.groupnorm_groups = 2;
    cfg.time_embed_dim = 8;
    cfg.image_size = 8;
    Rng wr(77);
    auto model = build_unet(cfg, wr);
    REQUIRE(model.parameter_count() <= 10000);

    // the zero-init head blocks upstream flow; use random weights everywhere
    Rng pr(78);
    for (auto& [name, t] : model.params()) {
        if (name == "out.conv.w")
            for (float& v : t.data()) v = static_cast<float>(pr.normal() * 0.2);
    }

    auto s = NoiseSchedule::make(ScheduleKind::cosine, 10, 1e-4, 0.02);
    Rng dr(79);
    auto x = Tensor::randn({2, 3, 8, 8}, dr);
    auto y0 = Tensor::uniform({2, 1, 8, 8}, dr, -1, 1);
    auto eps = Tensor::randn({2, 1, 8, 8}, dr);
    const std::vector<int> ts = {3, 8};

    auto loss = training_loss_batch(model, x, y0, ts, eps, s, LossNorm::l2);
    loss.backward();

    // FD reference: same forward pass, loss accumulated in double so small
    // per-weight gradients stay above the float32 noise floor
    auto yt = Tensor::zeros(y0.shape());
    for (i64 n = 0; n < 2; ++n) {
        const double g = s.gamma_at(ts[n]);
        for (i64 i = 0; i < 64; ++i) {
            yt.data()[n * 64 + i] = float(std::sqrt(g)) * y0.data()[n * 64 + i] +
                                    float(std::sqrt(1 - g)) * eps.data()[n * 64 + i];
        }
    }
    auto loss_fn = [&]() {
        NoGradGuard ng;
        auto eh = model.forward(x, yt, ts);
        double acc = 0;
        for (i64 i = 0; i < eh.numel(); ++i) {
            const double d = double(eh.data()[i]) - double(eps.data()[i]);
            acc += d * d;
        }
        return acc / double(eh.numel());
    };

    // directional derivative per weight array, plus spot checks of the
    // best-conditioned individual coordinates
    i64 total_checked = 0;
    for (auto& [name, t] : model.params()) {
        const double dir_err = oracle::fd_directional(t, loss_fn, 1e-2, fnv1a64(name));
        INFO(name << " directional");
        CHECK(dir_err < 1e-2);
        auto r = oracle::fd_check(t, loss_fn, 1e-2, 0.5, 2);
        INFO(name << " (" << r.checked << " coords)");
        CHECK(r.max_rel_err < 1e-2);
        total_checked += r.checked + 1;
    }
    CHECK(total_checked > 30);
}
