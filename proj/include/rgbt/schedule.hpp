#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rgbt/common.hpp"

namespace rgbt {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "cosine";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind: " + s);
}

// Per-step retention factors alpha_t and their running product gamma_t,
// precomputed in double. Indexing is 1-based through alpha_at / gamma_at,
// with gamma_at(0) == 1 so the posterior is well-defined at t == 1.
class NoiseSchedule {
  public:
    static NoiseSchedule make(ScheduleKind kind, int T, double beta_start, double beta_end) {
        if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
        if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
            throw ConfigError("invalid beta range [" + std::to_string(beta_start) + ", " +
                              std::to_string(beta_end) + "]");
        }
        NoiseSchedule s;
        s.kind_ = kind;
        s.T_ = T;
        s.beta_start_ = beta_start;
        s.beta_end_ = beta_end;
        s.alpha_.resize(T);
        s.gamma_.resize(T);
        if (kind == ScheduleKind::linear) {
            for (int t = 1; t <= T; ++t) {
                const double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
                const double beta = beta_start + (beta_end - beta_start) * frac;
                s.alpha_[t - 1] = 1.0 - beta;
            }
        } else {
            // squared-cosine profile for gamma; alpha recovered as the ratio of
            // consecutive gammas and clipped, then gamma rebuilt as the running
            // product so the defining identity holds exactly
            const double off = 0.008;
            auto f = [off, T](double t) {
                const double v = std::cos((t / T + off) / (1.0 + off) * 1.5707963267948966);
                return v * v;
            };
            double prev = 1.0;
            for (int t = 1; t <= T; ++t) {
                const double g = f(double(t)) / f(0.0);
                double a = g / prev;
                prev = g;
                a = std::min(0.9999, std::max(0.001, a));
                s.alpha_[t - 1] = a;
            }
        }
        double run = 1.0;
        for (int t = 1; t <= T; ++t) {
            run *= s.alpha_[t - 1];
            s.gamma_[t - 1] = run;
        }
        return s;
    }

    ScheduleKind kind() const { return kind_; }
    int T() const { return T_; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    double alpha_at(int t) const {
        check_t(t);
        return alpha_[t - 1];
    }

    double gamma_at(int t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return gamma_[t - 1];
    }

    void check_t(int t) const {
        if (t < 1 || t > T_) {
            throw ShapeError("timestep " + std::to_string(t) + " outside schedule range [1, " +
                             std::to_string(T_) + "]");
        }
    }

  private:
    ScheduleKind kind_ = ScheduleKind::linear;
    int T_ = 0;
    double beta_start_ = 0, beta_end_ = 0;
    std::vector<double> alpha_, gamma_;
};

}  // namespace rgbt
