#pragma once

#include <vector>

#include "dzsi/diffusion.hpp"
#include "dzsi/models.hpp"

namespace dzsi {

// One additive guidance term: lambda * grad_x log p_k(category | x, t).
template <typename S>
struct GuidanceTerm {
    const GuidanceGrad<S>* classifier = nullptr;
    int category = 0;
    S lambda = S(0);
};

// Sum of lambda-weighted classifier score gradients, all evaluated at the
// predicted mean. An empty term list means unconditional sampling.
template <typename S>
struct GuidanceSpec {
    std::vector<GuidanceTerm<S>> terms;
    // optional per-step clamp on the shift magnitude (inf-norm); <= 0 disables
    S shift_clamp = S(0);

    bool empty() const { return terms.empty(); }

    void validate() const {
        for (size_t i = 0; i < terms.size(); ++i) {
            const auto& t = terms[i];
            require(t.classifier != nullptr, "guidance term without classifier");
            require_finite(t.lambda, "guidance lambda");
            require(t.category >= 0 && t.category < t.classifier->categories(),
                    "guidance category out of range");
            for (size_t j = 0; j < i; ++j)
                require(terms[j].classifier != t.classifier || terms[j].category != t.category,
                        "duplicate (classifier, category) guidance term");
        }
    }
};

// grad_x log p(category | x, t); shape matches x.
template <typename S>
inline Tensor<S> classifier_grad_logp(const GuidanceGrad<S>& classifier, const Tensor<S>& x,
                                      int t, int category) {
    require(category >= 0 && category < classifier.categories(), "category out of range");
    return classifier.grad_logp(x, t, category);
}

// mu_tilde = mu + sigma2_t * sum_km lambda_km grad_km. sigma2 may be a scalar
// (fixed variance) or per-element (learned variance).
template <typename S>
inline Tensor<S> multi_guidance_shift(const Tensor<S>& mu, const Tensor<S>& sigma2,
                                      const GuidanceSpec<S>& spec,
                                      const std::vector<Tensor<S>>& grads) {
    require(grads.size() == spec.terms.size(), "one gradient per guidance term required");
    Tensor<S> shift(mu.shape);
    for (size_t k = 0; k < grads.size(); ++k) {
        require(grads[k].same_shape(mu), "guidance gradient shape mismatch");
        axpy(spec.terms[k].lambda, grads[k], shift);
    }
    Tensor<S> out(mu.shape);
    const bool scalar_sigma = sigma2.size() == 1;
    for (int64_t i = 0; i < mu.size(); ++i) {
        S s = (scalar_sigma ? sigma2[0] : sigma2[i]) * shift[i];
        if (spec.shift_clamp > S(0)) s = std::clamp(s, -spec.shift_clamp, spec.shift_clamp);
        out[i] = mu[i] + s;
    }
    return out;
}

template <typename S>
inline Tensor<S> multi_guidance_shift(const Tensor<S>& mu, double sigma2,
                                      const GuidanceSpec<S>& spec,
                                      const std::vector<Tensor<S>>& grads) {
    Tensor<S> s({1});
    s[0] = static_cast<S>(sigma2);
    return multi_guidance_shift(mu, s, spec, grads);
}

// Classifier-free multi-guidance score combination:
//   s_cfg = -lambda * s_null + (1 - lambda) * (s_cond0 + s_cond1) / 2
template <typename S>
inline Tensor<S> cfg_multi_score(const Tensor<S>& s_null, const Tensor<S>& s_cond0,
                                 const Tensor<S>& s_cond1, S lambda) {
    require(s_null.same_shape(s_cond0) && s_null.same_shape(s_cond1),
            "cfg scores must share a shape");
    Tensor<S> out(s_null.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = -lambda * s_null[i] + (S(1) - lambda) * S(0.5) * (s_cond0[i] + s_cond1[i]);
    return out;
}

// Denoiser combining a null-token stream with the two conditional streams by
// the cfg-multi formula. Linear in the scores, so the same coefficients apply
// to the eps parameterization directly.
template <typename S>
class CfgMultiDenoiser : public Denoiser<S> {
  public:
    CfgMultiDenoiser(const Denoiser<S>& null_model, const Denoiser<S>& cond0,
                     const Denoiser<S>& cond1, S lambda)
        : null_(null_model), c0_(cond0), c1_(cond1), lambda_(lambda) {}

    void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const override {
        Tensor<S> e_null, e0, e1;
        null_.denoise(x, t, e_null, v);
        c0_.denoise(x, t, e0, nullptr);
        c1_.denoise(x, t, e1, nullptr);
        eps = cfg_multi_score(e_null, e0, e1, lambda_);
    }

    bool has_v_head() const override { return null_.has_v_head(); }

  private:
    const Denoiser<S>& null_;
    const Denoiser<S>& c0_;
    const Denoiser<S>& c1_;
    S lambda_;
};

// Guided reverse-step mean: mu_theta from the eps prediction, per-term
// gradients evaluated at mu_theta (conditioned on the previous retained step
// index), then the multi-guidance shift.
template <typename S>
inline Tensor<S> guided_ddpm_mean(const Tensor<S>& xt, int t, const Denoiser<S>& model,
                                  const GuidanceSpec<S>& spec, const NoiseSchedule& sched,
                                  const Tensor<S>* sigma2_learned = nullptr) {
    sched.check_t(t);
    Tensor<S> eps_hat;
    model.denoise(xt, t, eps_hat, nullptr);
    Tensor<S> mu = mu_from_eps(xt, t, eps_hat, sched);
    if (spec.empty()) return mu;
    spec.validate();
    const int t_eval = sched.model_t(t - 1);
    std::vector<Tensor<S>> grads;
    grads.reserve(spec.terms.size());
    for (const auto& term : spec.terms)
        grads.push_back(term.classifier->grad_logp(mu, t_eval, term.category));
    if (sigma2_learned) return multi_guidance_shift(mu, *sigma2_learned, spec, grads);
    return multi_guidance_shift(mu, sched.beta_tilde[static_cast<size_t>(t)], spec, grads);
}

}  // namespace dzsi
