#pragma once

#include <cstdint>
#include <vector>

#include "dvd/common.hpp"

namespace dvd {

/// Timestep argument meaning "the clean end of the chain"; its cumulative
/// alpha product is 1. Used as the target of the last sampler step and the
/// source of the first inversion step.
inline constexpr int kCleanStep = -1;

/// Linear-beta forward-process schedule with cumulative alpha products.
/// Stored in double so downstream 32-bit tensor math starts from exact
/// coefficients.
struct NoiseSchedule {
    double beta_start = 0.0;
    double beta_end = 0.0;
    int total_timesteps = 0;
    std::vector<double> betas;       // betas[t], length total_timesteps
    std::vector<double> alpha_bars;  // prod_{u<=t} (1 - betas[u])

    double alpha_bar(int t) const {
        if (t == kCleanStep)
            return 1.0;
        require(t >= 0 && t < total_timesteps,
                "alpha_bar: timestep " + std::to_string(t) + " outside [0, " +
                    std::to_string(total_timesteps - 1) + "]");
        return alpha_bars[static_cast<size_t>(t)];
    }
};

inline NoiseSchedule make_linear_schedule(double beta_start, double beta_end, int T) {
    require_domain(T >= 1, "make_linear_schedule: T must be >= 1");
    require_domain(beta_start > 0.0 && beta_start < 1.0,
                   "make_linear_schedule: beta_start outside (0, 1)");
    require_domain(beta_end > 0.0 && beta_end < 1.0,
                   "make_linear_schedule: beta_end outside (0, 1)");
    require_domain(beta_start <= beta_end,
                   "make_linear_schedule: beta_start must not exceed beta_end");
    require_domain(T > 1 || beta_start == beta_end,
                   "make_linear_schedule: T == 1 requires beta_start == beta_end");

    NoiseSchedule s;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.total_timesteps = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        const double frac = (T == 1) ? 0.0 : static_cast<double>(t) / (T - 1);
        s.betas[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
    }
    // Endpoints exact by assignment, not by interpolation rounding.
    s.betas.front() = beta_start;
    s.betas.back() = beta_end;

    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        prod *= 1.0 - s.betas[static_cast<size_t>(t)];
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

/// Descending, uniformly strided subsequence of [0, T-1] visited by the
/// sampler: {T-1, T-1-stride, ..., T-1-(steps-1)*stride} with stride T/steps.
struct TimestepPlan {
    int steps = 0;
    std::vector<int> indices;  // strictly descending

    int first() const { return indices.front(); }
    int last() const { return indices.back(); }
};

inline TimestepPlan make_timestep_plan(int T, int steps) {
    require_domain(steps >= 1, "make_timestep_plan: steps must be >= 1");
    require_domain(steps <= T, "make_timestep_plan: steps must not exceed T");
    const int stride = T / steps;
    TimestepPlan plan;
    plan.steps = steps;
    plan.indices.resize(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        plan.indices[static_cast<size_t>(i)] = T - 1 - i * stride;
    return plan;
}

struct GuidanceConfig {
    double scale = 7.5;
    bool uses_null_condition = true;

    void validate() const { require_domain(scale >= 0.0, "guidance scale must be >= 0"); }
};

}  // namespace dvd
