#pragma once

#include <cmath>
#include <vector>

#include "rgbt/common.hpp"
#include "rgbt/config.hpp"
#include "rgbt/tensor.hpp"

namespace rgbt {

// ema <- decay * ema + (1 - decay) * w, elementwise.
inline void ema_update(std::vector<float>& ema_weights, std::span<const float> weights,
                       double decay) {
    if (decay < 0.0 || decay >= 1.0) throw ConfigError("ema decay must be in [0, 1)");
    if (ema_weights.size() != weights.size()) {
        throw ShapeError("ema_update: " + std::to_string(ema_weights.size()) + " vs " +
                         std::to_string(weights.size()) + " elements");
    }
    for (size_t i = 0; i < ema_weights.size(); ++i) {
        ema_weights[i] = static_cast<float>(decay * ema_weights[i] + (1.0 - decay) * weights[i]);
    }
}

class Adam {
  public:
    explicit Adam(OptimParams p) : p_(p) {}

    // One update over the model's ordered parameter list; reads .grad(),
    // leaves zeroing to the caller.
    void step(std::vector<std::pair<std::string, Tensor>>& params) {
        if (m_.empty()) {
            for (const auto& [name, t] : params) {
                m_.emplace_back(t.numel(), 0.f);
                v_.emplace_back(t.numel(), 0.f);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(p_.beta1, t_);
        const double bc2 = 1.0 - std::pow(p_.beta2, t_);
        for (size_t k = 0; k < params.size(); ++k) {
            auto& tensor = params[k].second;
            if (!tensor.has_grad()) continue;
            auto w = tensor.data();
            auto g = tensor.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (i64 i = 0; i < tensor.numel(); ++i) {
                const double gi = g[i];
                const double mi = p_.beta1 * m[i] + (1.0 - p_.beta1) * gi;
                const double vi = p_.beta2 * v[i] + (1.0 - p_.beta2) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                double upd = mhat / (std::sqrt(vhat) + p_.eps);
                if (p_.weight_decay > 0) upd += p_.weight_decay * w[i];
                w[i] = static_cast<float>(w[i] - p_.lr * upd);
            }
        }
    }

  private:
    OptimParams p_;
    i64 t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace rgbt
