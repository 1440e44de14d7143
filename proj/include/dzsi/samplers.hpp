#pragma once

#include <vector>

#include "dzsi/guidance.hpp"
#include "dzsi/parallel.hpp"

namespace dzsi {

enum class SamplerKind { Ddpm, Ddim };

inline SamplerKind sampler_from_string(const std::string& s) {
    if (s == "ddpm") return SamplerKind::Ddpm;
    if (s == "ddim") return SamplerKind::Ddim;
    throw config_error("unknown sampler: " + s);
}

enum class VarianceMode { FixedBetaTilde, FixedBeta, Learned };

struct SampleOptions {
    SamplerKind sampler = SamplerKind::Ddpm;
    int substeps = 0;  // 0 = all T steps
    VarianceMode variance = VarianceMode::Learned;
    double ddim_eta = 0.0;
    bool clip_output = true;
    // clamp the implied x0 prediction into the data range each step (the
    // standard companion of [-1, 1] image data; off for unbounded domains)
    bool clip_x0 = true;
};

// One ancestral step x_t -> x_{t-1}. The step index t refers to the given
// (possibly strided) schedule; the model is conditioned on sched.model_t(t).
// No noise is added at t = 1.
template <typename S>
inline Tensor<S> ddpm_step(const Tensor<S>& xt, int t, const Denoiser<S>& model,
                           const GuidanceSpec<S>& spec, const NoiseSchedule& sched, Rng& rng,
                           VarianceMode vmode = VarianceMode::Learned, bool clip_x0 = false) {
    sched.check_t(t);
    const int mt = sched.model_t(t);
    Tensor<S> eps_hat, v;
    model.denoise(xt, mt, eps_hat, model.has_v_head() ? &v : nullptr);
    Tensor<S> mu;
    if (clip_x0) {
        Tensor<S> x0 = x0_from_eps(xt, t, eps_hat, sched);
        clamp_inplace(x0, S(-1), S(1));
        mu = posterior_mean_var(x0, xt, t, sched).mean;
    } else {
        mu = mu_from_eps(xt, t, eps_hat, sched);
    }

    const auto u = static_cast<size_t>(t);
    Tensor<S> sigma2({1});
    bool learned = vmode == VarianceMode::Learned && model.has_v_head() && v.size() == xt.size();
    if (learned) {
        sigma2 = Tensor<S>(xt.shape);
        for (int64_t i = 0; i < v.size(); ++i) sigma2[i] = learned_variance(v[i], t, sched);
    } else {
        sigma2[0] = static_cast<S>(vmode == VarianceMode::FixedBeta ? sched.beta[u]
                                                                    : sched.beta_tilde[u]);
    }

    if (!spec.empty()) {
        spec.validate();
        const int t_eval = sched.model_t(t - 1);
        std::vector<Tensor<S>> grads;
        grads.reserve(spec.terms.size());
        for (const auto& term : spec.terms)
            grads.push_back(term.classifier->grad_logp(mu, t_eval, term.category));
        mu = multi_guidance_shift(mu, sigma2, spec, grads);
    }

    if (t == 1) return mu;
    Tensor<S> out(mu.shape);
    const bool scalar_sigma = sigma2.size() == 1;
    for (int64_t i = 0; i < mu.size(); ++i) {
        const S sd = std::sqrt(scalar_sigma ? sigma2[0] : sigma2[i]);
        out[i] = mu[i] + sd * static_cast<S>(rng.normal());
    }
    return out;
}

// DDIM update x_t -> x_{t_prev} on the full schedule, with eta-controlled
// stochasticity. eta = 0 consumes no randomness. Guidance (when present)
// enters through the score-shifted eps, with gradients evaluated at the
// unguided deterministic mean for the target step.
template <typename S>
inline Tensor<S> ddim_step(const Tensor<S>& xt, int t, int t_prev, const Denoiser<S>& model,
                           double eta, const GuidanceSpec<S>& spec, const NoiseSchedule& sched,
                           Rng* rng, bool* sigma_clamped = nullptr, bool clip_x0 = false) {
    sched.check_t(t);
    require(t_prev >= 0 && t_prev < t, "ddim: t_prev must be below t");
    const auto u = static_cast<size_t>(t);
    const double ab = sched.alpha_bar[u];
    const double ab_prev = sched.alpha_bar[static_cast<size_t>(t_prev)];

    Tensor<S> eps_hat;
    model.denoise(xt, sched.model_t(t), eps_hat, nullptr);

    double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    double rest = 1.0 - ab_prev - sigma * sigma;
    if (rest < 0.0) {  // sigma too large for this step pair
        sigma = std::sqrt(1.0 - ab_prev);
        rest = 0.0;
        if (sigma_clamped) *sigma_clamped = true;
    }

    if (!spec.empty()) {
        spec.validate();
        // unguided deterministic mean at t_prev as the evaluation point
        Tensor<S> mean(xt.shape);
        const double ca = std::sqrt(ab_prev / ab);
        const double cb = std::sqrt(rest) - ca * std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < xt.size(); ++i)
            mean[i] = static_cast<S>(ca * xt[i] + cb * eps_hat[i]);
        const int t_eval = sched.model_t(t_prev);
        Tensor<S> g(xt.shape);
        for (const auto& term : spec.terms) {
            Tensor<S> gi = term.classifier->grad_logp(mean, t_eval, term.category);
            axpy(term.lambda, gi, g);
        }
        // eps <- eps - sqrt(1 - alpha_bar_t) * total score gradient
        axpy(static_cast<S>(-std::sqrt(1.0 - ab)), g, eps_hat);
    }

    Tensor<S> x0 = x0_from_eps(xt, t, eps_hat, sched);
    if (clip_x0) clamp_inplace(x0, S(-1), S(1));
    Tensor<S> out(xt.shape);
    const double a = std::sqrt(ab_prev);
    const double b = std::sqrt(rest);
    for (int64_t i = 0; i < xt.size(); ++i)
        out[i] = static_cast<S>(a * x0[i] + b * eps_hat[i]);
    if (sigma > 0.0) {
        require(rng != nullptr, "stochastic ddim needs an rng");
        for (int64_t i = 0; i < out.size(); ++i)
            out[i] += static_cast<S>(sigma * rng->normal());
    }
    return out;
}

// Deterministic DDIM inversion: run the eta = 0 update in reverse time over
// the unit-stride grid 0..steps, returning the latent at level `steps`.
template <typename S>
inline Tensor<S> ddim_encode(const Tensor<S>& x0, const Denoiser<S>& model, int steps,
                             const NoiseSchedule& sched) {
    require(steps >= 0 && steps <= sched.T(), "encode steps out of range");
    Tensor<S> x = x0;
    for (int s = 0; s < steps; ++s) {
        Tensor<S> eps_hat;
        model.denoise(x, s, eps_hat, nullptr);
        const double ab_cur = sched.alpha_bar[static_cast<size_t>(s)];
        const double ab_next = sched.alpha_bar[static_cast<size_t>(s) + 1];
        Tensor<S> next(x.shape);
        const double ca = std::sqrt(ab_next / ab_cur);
        const double cb = std::sqrt(1.0 - ab_next) - ca * std::sqrt(1.0 - ab_cur);
        for (int64_t i = 0; i < x.size(); ++i)
            next[i] = static_cast<S>(ca * x[i] + cb * eps_hat[i]);
        x = std::move(next);
    }
    return x;
}

// Decode a latent at level `steps` back to a sample with eta = 0 DDIM over
// the same unit-stride grid (the inverse walk of ddim_encode).
template <typename S>
inline Tensor<S> ddim_decode(const Tensor<S>& latent, const Denoiser<S>& model, int steps,
                             const NoiseSchedule& sched, const GuidanceSpec<S>& spec = {},
                             const double* eta_of_t = nullptr, Rng* rng = nullptr) {
    require(steps >= 0 && steps <= sched.T(), "decode steps out of range");
    Tensor<S> x = latent;
    for (int t = steps; t >= 1; --t) {
        double eta = eta_of_t ? eta_of_t[t] : 0.0;
        x = ddim_step(x, t, t - 1, model, eta, spec, sched, rng);
    }
    return x;
}

// Full reverse chain for one sample from pure noise.
template <typename S>
inline Tensor<S> sample_chain(const Denoiser<S>& model, const NoiseSchedule& sched,
                              const GuidanceSpec<S>& spec, const SampleOptions& opt, Rng rng,
                              const std::vector<int>& shape) {
    Tensor<S> x(shape);
    rng.fill_normal(x);
    if (opt.sampler == SamplerKind::Ddpm) {
        for (int t = sched.T(); t >= 1; --t)
            x = ddpm_step(x, t, model, spec, sched, rng, opt.variance, opt.clip_x0);
    } else {
        for (int t = sched.T(); t >= 1; --t) {
            // strided schedules carry their own model-step mapping
            x = ddim_step(x, t, t - 1, model, opt.ddim_eta, spec, sched,
                          opt.ddim_eta > 0.0 ? &rng : nullptr, nullptr, opt.clip_x0);
        }
    }
    if (opt.clip_output) clamp_inplace(x, S(-1), S(1));
    return x;
}

// n independent chains over an evenly strided step grid. Chain i's stream is
// derived by seed-splitting, so its output does not depend on n.
template <typename S>
inline std::vector<Tensor<S>> sample(const Denoiser<S>& model, int n,
                                     const NoiseSchedule& sched, const SampleOptions& opt,
                                     const GuidanceSpec<S>& spec, Rng rng,
                                     const std::vector<int>& shape) {
    require(opt.substeps <= sched.T(), "substeps must not exceed T");
    const NoiseSchedule* use = &sched;
    NoiseSchedule strided;
    if (opt.substeps > 0 && opt.substeps < sched.T()) {
        strided = restrict_schedule(sched, opt.substeps);
        use = &strided;
    }
    std::vector<Tensor<S>> out(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            out[static_cast<size_t>(i)] =
                sample_chain(model, *use, spec, opt, rng.fork(static_cast<uint64_t>(i)), shape);
    });
    return out;
}

}  // namespace dzsi
