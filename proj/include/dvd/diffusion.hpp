#pragma once

#include <cmath>

#include "dvd/schedule.hpp"
#include "dvd/tensor.hpp"

namespace dvd {

/// Forward process: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x0, const Tensor<T>& eps, int t,
                    const NoiseSchedule& sched) {
    require(x0.same_shape(eps), "add_noise: x0/eps shape mismatch " +
                                    shape_to_string(x0.shape()) + " vs " +
                                    shape_to_string(eps.shape()));
    const double ab = sched.alpha_bar(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out(x0.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = a * x0[i] + b * eps[i];
    return out;
}

/// Deterministic DDIM update from timestep t to t_prev (t_prev may be
/// kCleanStep, where the cumulative alpha is taken as 1 and the step returns
/// the predicted clean latent).
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t, int t_prev,
                    const NoiseSchedule& sched) {
    require(x_t.same_shape(eps_hat), "ddim_step: latent/eps shape mismatch");
    require(t_prev == kCleanStep || t_prev >= 0, "ddim_step: bad t_prev");
    require(t >= 0 && t > t_prev, "ddim_step: requires t > t_prev");
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    const T inv_sqrt_ab_t = static_cast<T>(1.0 / std::sqrt(ab_t));
    const T sqrt_om_t = static_cast<T>(std::sqrt(1.0 - ab_t));
    const T sqrt_ab_p = static_cast<T>(std::sqrt(ab_p));
    const T sqrt_om_p = static_cast<T>(std::sqrt(1.0 - ab_p));
    Tensor<T> out(x_t.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T x0_hat = (x_t[i] - sqrt_om_t * eps_hat[i]) * inv_sqrt_ab_t;
        out[i] = sqrt_ab_p * x0_hat + sqrt_om_p * eps_hat[i];
    }
    return out;
}

/// Exact algebraic inverse of ddim_step under the same eps_hat: maps the
/// latent at timestep t up to t_next (t may be kCleanStep when noising a
/// clean latent).
template <typename T>
Tensor<T> ddim_invert_step(const Tensor<T>& x_t, const Tensor<T>& eps_hat, int t,
                           int t_next, const NoiseSchedule& sched) {
    require(x_t.same_shape(eps_hat), "ddim_invert_step: latent/eps shape mismatch");
    require(t == kCleanStep || t >= 0, "ddim_invert_step: bad t");
    require(t_next > t && t_next >= 0, "ddim_invert_step: requires t_next > t");
    const double ab_t = sched.alpha_bar(t);
    const double ab_n = sched.alpha_bar(t_next);
    const T inv_sqrt_ab_t = static_cast<T>(1.0 / std::sqrt(ab_t));
    const T sqrt_om_t = static_cast<T>(std::sqrt(1.0 - ab_t));
    const T sqrt_ab_n = static_cast<T>(std::sqrt(ab_n));
    const T sqrt_om_n = static_cast<T>(std::sqrt(1.0 - ab_n));
    Tensor<T> out(x_t.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T x0_hat = (x_t[i] - sqrt_om_t * eps_hat[i]) * inv_sqrt_ab_t;
        out[i] = sqrt_ab_n * x0_hat + sqrt_om_n * eps_hat[i];
    }
    return out;
}

/// Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond).
/// w == 1 and w == 0 return the corresponding input unchanged.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double w) {
    require(eps_uncond.same_shape(eps_cond), "cfg_combine: shape mismatch " +
                                                 shape_to_string(eps_uncond.shape()) +
                                                 " vs " + shape_to_string(eps_cond.shape()));
    require(w >= 0.0, "cfg_combine: guidance scale must be >= 0");
    if (w == 1.0)
        return eps_cond;
    if (w == 0.0)
        return eps_uncond;
    const T wt = static_cast<T>(w);
    Tensor<T> out(eps_uncond.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + wt * (eps_cond[i] - eps_uncond[i]);
    return out;
}

}  // namespace dvd
