#pragma once

#include <cmath>

#include "dzsi/models.hpp"
#include "dzsi/rng.hpp"
#include "dzsi/schedule.hpp"
#include "dzsi/tensor.hpp"

namespace dzsi {

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <typename S>
inline Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                          const NoiseSchedule& sched) {
    sched.check_t(t);
    require(x0.same_shape(eps), "q_sample: x0/eps shape mismatch");
    const double ab = sched.alpha_bar[static_cast<size_t>(t)];
    const S a = static_cast<S>(std::sqrt(ab));
    const S b = static_cast<S>(std::sqrt(1.0 - ab));
    Tensor<S> xt(x0.shape);
    for (int64_t i = 0; i < x0.size(); ++i) xt[i] = a * x0[i] + b * eps[i];
    return xt;
}

// One drawn training example: x_t built by q_sample with recorded noise.
template <typename S>
struct DiffusionBatchItem {
    Tensor<S> x0;
    int t = 1;
    Tensor<S> eps;
    Tensor<S> xt;
};

template <typename S>
inline DiffusionBatchItem<S> draw_batch_item(const Tensor<S>& x0, const NoiseSchedule& sched,
                                             Rng& rng) {
    DiffusionBatchItem<S> it;
    it.x0 = x0;
    it.t = rng.uniform_int(1, sched.T());
    it.eps = Tensor<S>(x0.shape);
    rng.fill_normal(it.eps);
    it.xt = q_sample(it.x0, it.t, it.eps, sched);
    return it;
}

// Forward-posterior q(x_{t-1} | x_t, x_0): mean coefficients depend only on
// t and are both nonnegative; variance is beta_tilde_t.
template <typename S>
struct PosteriorOut {
    Tensor<S> mean;
    double var = 0.0;
};

template <typename S>
inline PosteriorOut<S> posterior_mean_var(const Tensor<S>& x0, const Tensor<S>& xt, int t,
                                          const NoiseSchedule& sched) {
    sched.check_t(t);
    require(x0.same_shape(xt), "posterior: x0/xt shape mismatch");
    const auto u = static_cast<size_t>(t);
    const double ab = sched.alpha_bar[u];
    const double ab_prev = sched.alpha_bar[u - 1];
    const double c0 = std::sqrt(ab_prev) * sched.beta[u] / (1.0 - ab);
    const double ct = std::sqrt(sched.alpha[u]) * (1.0 - ab_prev) / (1.0 - ab);
    PosteriorOut<S> out;
    out.mean = Tensor<S>(x0.shape);
    for (int64_t i = 0; i < x0.size(); ++i)
        out.mean[i] = static_cast<S>(c0 * x0[i] + ct * xt[i]);
    out.var = sched.beta_tilde[u];
    return out;
}

// mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
template <typename S>
inline Tensor<S> mu_from_eps(const Tensor<S>& xt, int t, const Tensor<S>& eps_hat,
                             const NoiseSchedule& sched) {
    sched.check_t(t);
    const auto u = static_cast<size_t>(t);
    const double inv_sqrt_a = 1.0 / std::sqrt(sched.alpha[u]);
    const double coef = sched.beta[u] / std::sqrt(1.0 - sched.alpha_bar[u]);
    Tensor<S> mu(xt.shape);
    for (int64_t i = 0; i < xt.size(); ++i)
        mu[i] = static_cast<S>(inv_sqrt_a * (xt[i] - coef * eps_hat[i]));
    return mu;
}

// x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)
template <typename S>
inline Tensor<S> x0_from_eps(const Tensor<S>& xt, int t, const Tensor<S>& eps_hat,
                             const NoiseSchedule& sched) {
    const auto u = static_cast<size_t>(t);
    const double ab = sched.alpha_bar[u];
    Tensor<S> x0(xt.shape);
    const double a = 1.0 / std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    for (int64_t i = 0; i < xt.size(); ++i) x0[i] = static_cast<S>(a * (xt[i] - b * eps_hat[i]));
    return x0;
}

// Sigma = exp(v log beta_t + (1 - v) log beta_tilde_t), v clamped to [0,1].
// beta_tilde_1 is 0 by definition; its log is clipped to log beta_tilde_2
// (the convention of the learned-covariance recipe) so the interpolation
// stays finite at t = 1.
inline double interp_log_variance(double v, int t, const NoiseSchedule& sched) {
    sched.check_t(t);
    const auto u = static_cast<size_t>(t);
    const double vv = std::clamp(v, 0.0, 1.0);
    double bt = sched.beta_tilde[u];
    if (t == 1 && sched.T() >= 2) bt = sched.beta_tilde[2];
    return vv * std::log(sched.beta[u]) + (1.0 - vv) * std::log(bt);
}

template <typename S>
inline S learned_variance(S v, int t, const NoiseSchedule& sched) {
    return static_cast<S>(std::exp(interp_log_variance(static_cast<double>(v), t, sched)));
}

// ---------------------------------------------------------------------------
// Losses. The per-sample helpers expose the gradients the trainers need;
// the batch-level entry points are pure evaluations.
// ---------------------------------------------------------------------------

// Mean squared error between recorded and predicted noise over all elements.
// d(loss)/d(eps_hat) written per element when requested.
template <typename S>
inline double simple_term(const Tensor<S>& eps, const Tensor<S>& eps_hat, Tensor<S>* deps_hat) {
    require(eps.same_shape(eps_hat), "loss: eps shape mismatch");
    const int64_t n = eps.size();
    double acc = 0.0;
    if (deps_hat) *deps_hat = Tensor<S>(eps.shape);
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(eps_hat[i]) - static_cast<double>(eps[i]);
        acc += d * d;
        if (deps_hat) (*deps_hat)[i] = static_cast<S>(2.0 * d / n);
    }
    return acc / static_cast<double>(n);
}

// KL(N(mu1, var1) || N(mu2, var2)) for scalars, natural log.
inline double gaussian_kl(double mu1, double var1, double mu2, double var2) {
    return 0.5 * (std::log(var2 / var1) + (var1 + (mu1 - mu2) * (mu1 - mu2)) / var2 - 1.0);
}

// Variational-bound term for one drawn (x0, x_t, t) with a learned-variance
// head. The model mean is treated as a constant (stop-gradient): only dv is
// produced. Term value is the mean over elements; t = 1 uses the Gaussian
// log-likelihood of x0 under N(mu_theta, Sigma_theta).
template <typename S>
inline double vlb_term(const Tensor<S>& x0, const Tensor<S>& xt, int t, const Tensor<S>& eps_hat,
                       const Tensor<S>& v, const NoiseSchedule& sched, Tensor<S>* dv) {
    sched.check_t(t);
    require(v.same_shape(x0), "vlb: v head shape mismatch");
    const auto u = static_cast<size_t>(t);
    const double log_beta = std::log(sched.beta[u]);
    double bt = sched.beta_tilde[u];
    if (t == 1 && sched.T() >= 2) bt = sched.beta_tilde[2];
    const double log_bt = std::log(bt);
    Tensor<S> mu = mu_from_eps(xt, t, eps_hat, sched);
    PosteriorOut<S> post = posterior_mean_var(x0, xt, t, sched);
    const int64_t n = x0.size();
    if (dv) *dv = Tensor<S>(x0.shape);
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double vv = std::clamp(static_cast<double>(v[i]), 0.0, 1.0);
        const double log_sig = vv * log_beta + (1.0 - vv) * log_bt;
        const double sig = std::exp(log_sig);
        if (sig <= 0.0 || !std::isfinite(sig)) throw numeric_error("vlb: degenerate variance");
        const double mu_p = static_cast<double>(mu[i]);
        double term, dterm_dlogsig;
        if (t == 1) {
            const double d = static_cast<double>(x0[i]) - mu_p;
            term = 0.5 * (std::log(2.0 * 3.14159265358979323846) + log_sig + d * d / sig);
            dterm_dlogsig = 0.5 * (1.0 - d * d / sig);
        } else {
            const double mu_q = static_cast<double>(post.mean[i]);
            const double var_q = post.var;
            term = 0.5 * (log_sig - std::log(var_q) +
                          (var_q + (mu_q - mu_p) * (mu_q - mu_p)) / sig - 1.0);
            dterm_dlogsig = 0.5 * (1.0 - (var_q + (mu_q - mu_p) * (mu_q - mu_p)) / sig);
        }
        acc += term;
        if (dv) {
            const bool interior = static_cast<double>(v[i]) > 0.0 && static_cast<double>(v[i]) < 1.0;
            const double dlogsig_dv = log_beta - log_bt;
            (*dv)[i] = interior ? static_cast<S>(dterm_dlogsig * dlogsig_dv / n) : S(0);
        }
    }
    return acc / static_cast<double>(n);
}

// Pure batch evaluations over any denoiser callable f(x, t) -> (eps_hat, v).
template <typename S, typename F>
inline double loss_simple(const std::vector<DiffusionBatchItem<S>>& batch, F&& model) {
    require(!batch.empty(), "loss over empty batch");
    double acc = 0.0;
    for (const auto& it : batch) {
        Tensor<S> eps_hat, v;
        model(it.xt, it.t, eps_hat, v);
        acc += simple_term(it.eps, eps_hat, static_cast<Tensor<S>*>(nullptr));
    }
    const double out = acc / static_cast<double>(batch.size());
    require_finite(out, "loss_simple");
    return out;
}

template <typename S, typename F>
inline double loss_vlb(const std::vector<DiffusionBatchItem<S>>& batch, F&& model,
                       const NoiseSchedule& sched) {
    require(!batch.empty(), "loss over empty batch");
    double acc = 0.0;
    for (const auto& it : batch) {
        Tensor<S> eps_hat, v;
        model(it.xt, it.t, eps_hat, v);
        require(v.size() == it.x0.size(), "loss_vlb needs a v head");
        acc += vlb_term(it.x0, it.xt, it.t, eps_hat, v, sched, static_cast<Tensor<S>*>(nullptr));
    }
    const double out = acc / static_cast<double>(batch.size());
    require_finite(out, "loss_vlb");
    return out;
}

template <typename S, typename F>
inline double loss_hybrid(const std::vector<DiffusionBatchItem<S>>& batch, F&& model,
                          const NoiseSchedule& sched, double vlb_weight = 1e-3) {
    return loss_simple<S>(batch, model) + vlb_weight * loss_vlb<S>(batch, model, sched);
}

}  // namespace dzsi
