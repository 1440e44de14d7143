#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dzsi/common.hpp"

namespace dzsi {

enum class ScheduleFamily { Cosine, Linear };

inline ScheduleFamily schedule_family_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleFamily::Cosine;
    if (s == "linear") return ScheduleFamily::Linear;
    throw config_error("unknown schedule family: " + s);
}

inline const char* to_string(ScheduleFamily f) {
    return f == ScheduleFamily::Cosine ? "cosine" : "linear";
}

struct ScheduleConfig {
    ScheduleFamily family = ScheduleFamily::Cosine;
    int T = 250;
    double s = 0.008;
};

// Per-step corruption coefficients, index 1..T; index 0 is the clean-data
// convention (alpha_bar[0] = 1, beta[0] = 0). All arrays are computed and
// held in double precision.
struct NoiseSchedule {
    ScheduleConfig config;
    std::vector<double> beta;        // beta[t]
    std::vector<double> alpha;       // 1 - beta[t]
    std::vector<double> alpha_bar;   // prod_{i<=t} alpha[i], alpha_bar[0] = 1
    std::vector<double> beta_tilde;  // (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]
    // When this schedule was re-derived over a strided step grid, orig_t[t]
    // gives the originating step index (the index models are conditioned on).
    std::vector<int> orig_t;

    int T() const { return config.T; }

    double alpha_bar_prev(int t) const { return alpha_bar[static_cast<size_t>(t) - 1]; }

    int model_t(int t) const { return orig_t.empty() ? t : orig_t[static_cast<size_t>(t)]; }

    void check_t(int t) const {
        require(t >= 1 && t <= config.T, "step index out of [1, T]");
    }

    void validate() const {
        require_config(config.T >= 2, "schedule needs T >= 2");
        for (int t = 1; t <= config.T; ++t) {
            auto u = static_cast<size_t>(t);
            require_config(beta[u] > 0.0 && beta[u] <= 0.999, "beta out of (0, 0.999]");
            require_config(alpha_bar[u] < alpha_bar[u - 1], "alpha_bar must be strictly decreasing");
            require_config(beta_tilde[u] <= beta[u] + 1e-15, "beta_tilde must not exceed beta");
            require_config(std::isfinite(beta[u]) && std::isfinite(alpha_bar[u]), "schedule non-finite");
        }
        require_config(alpha_bar[0] == 1.0, "alpha_bar[0] must be 1");
        require_config(alpha_bar[static_cast<size_t>(config.T)] < 1e-3, "alpha_bar[T] must be < 1e-3");
    }
};

namespace detail {

inline NoiseSchedule schedule_from_betas(ScheduleConfig cfg, const std::vector<double>& betas) {
    NoiseSchedule s;
    s.config = cfg;
    int T = cfg.T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    s.beta_tilde.assign(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        auto u = static_cast<size_t>(t);
        s.beta[u] = betas[u];
        s.alpha[u] = 1.0 - betas[u];
        s.alpha_bar[u] = s.alpha_bar[u - 1] * s.alpha[u];
        s.beta_tilde[u] = (1.0 - s.alpha_bar[u - 1]) / (1.0 - s.alpha_bar[u]) * s.beta[u];
    }
    return s;
}

}  // namespace detail

// f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2); alpha_bar_t = f(t)/f(0).
// Betas are the per-step ratios clipped to 0.999 so alpha_bar_T stays
// positive, as is standard for this family.
inline NoiseSchedule make_schedule(ScheduleFamily family, int T, double s = 0.008) {
    require_config(T >= 2, "schedule needs T >= 2");
    ScheduleConfig cfg{family, T, s};
    std::vector<double> betas(static_cast<size_t>(T) + 1, 0.0);
    if (family == ScheduleFamily::Cosine) {
        require_config(s > 0.0, "cosine schedule needs s > 0");
        auto f = [&](double t) {
            double c = std::cos((t / T + s) / (1.0 + s) * 1.5707963267948966);
            return c * c;
        };
        double f0 = f(0.0);
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            double cur = f(static_cast<double>(t)) / f0;
            double beta = 1.0 - cur / prev;
            betas[static_cast<size_t>(t)] = std::min(beta, 0.999);
            prev = cur;
        }
    } else {
        // Standard endpoints rescaled from the 1000-step reference grid.
        double lo = 1e-4 * (1000.0 / T);
        double hi = 0.02 * (1000.0 / T);
        for (int t = 1; t <= T; ++t) {
            double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
            betas[static_cast<size_t>(t)] = std::min(lo + (hi - lo) * frac, 0.999);
        }
    }
    NoiseSchedule sched = detail::schedule_from_betas(cfg, betas);
    sched.validate();
    return sched;
}

inline NoiseSchedule make_schedule(const ScheduleConfig& cfg) {
    return make_schedule(cfg.family, cfg.T, cfg.s);
}

// Re-derive the schedule over an evenly strided sub-grid of `substeps`
// retained steps. The sub-schedule keeps the retained alpha_bar values and
// recomputes per-step betas from their ratios; orig_t maps each sub-step
// back to the step index the model was trained on.
inline NoiseSchedule restrict_schedule(const NoiseSchedule& full, int substeps) {
    require_config(substeps >= 1 && substeps <= full.T(), "substeps must be in [1, T]");
    int T = full.T();
    std::vector<int> grid(static_cast<size_t>(substeps) + 1, 0);
    for (int i = 1; i <= substeps; ++i)
        grid[static_cast<size_t>(i)] = static_cast<int>(std::llround(static_cast<double>(i) * T / substeps));
    std::vector<double> betas(static_cast<size_t>(substeps) + 1, 0.0);
    for (int i = 1; i <= substeps; ++i) {
        double ab_cur = full.alpha_bar[static_cast<size_t>(grid[static_cast<size_t>(i)])];
        double ab_prev = full.alpha_bar[static_cast<size_t>(grid[static_cast<size_t>(i) - 1])];
        betas[static_cast<size_t>(i)] = 1.0 - ab_cur / ab_prev;
    }
    ScheduleConfig cfg = full.config;
    cfg.T = substeps;
    NoiseSchedule sub = detail::schedule_from_betas(cfg, betas);
    sub.orig_t = grid;
    return sub;
}

}  // namespace dzsi
