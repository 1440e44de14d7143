#pragma once

#include <vector>

#include "dzsi/samplers.hpp"

namespace dzsi {

// Spherical linear interpolation along the great circle between a and b,
// with a linear fallback when the angle vanishes.
template <typename S>
inline Tensor<S> slerp(const Tensor<S>& a, const Tensor<S>& b, double tau) {
    require(a.same_shape(b), "slerp endpoints must share a shape");
    require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
    const double na = static_cast<double>(norm2(a));
    const double nb = static_cast<double>(norm2(b));
    require(na > 0.0 && nb > 0.0, "slerp endpoints must be nonzero");
    double c = 0.0;
    for (int64_t i = 0; i < a.size(); ++i)
        c += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    c /= na * nb;
    c = std::clamp(c, -1.0, 1.0);
    const double omega = std::acos(c);
    Tensor<S> out(a.shape);
    if (omega < 1e-4) {
        for (int64_t i = 0; i < a.size(); ++i)
            out[i] = static_cast<S>((1.0 - tau) * a[i] + tau * b[i]);
        return out;
    }
    const double s = std::sin(omega);
    const double wa = std::sin((1.0 - tau) * omega) / s;
    const double wb = std::sin(tau * omega) / s;
    for (int64_t i = 0; i < a.size(); ++i)
        out[i] = static_cast<S>(wa * static_cast<double>(a[i]) + wb * static_cast<double>(b[i]));
    return out;
}

// Encode both sources to the common latent level, slerp at tau = k/(K-1),
// decode each frame with eta = 0 DDIM. Fully deterministic.
template <typename S>
inline std::vector<Tensor<S>> interpolate_latents(const Tensor<S>& xa, const Tensor<S>& xb,
                                                  const Denoiser<S>& model, int encode_steps,
                                                  int frames, const NoiseSchedule& sched) {
    require(frames >= 2, "need at least the two endpoint frames");
    Tensor<S> la = ddim_encode(xa, model, encode_steps, sched);
    Tensor<S> lb = ddim_encode(xb, model, encode_steps, sched);
    std::vector<Tensor<S>> out(static_cast<size_t>(frames));
    parallel_for(frames, [&](int64_t lo, int64_t hi) {
        for (int64_t k = lo; k < hi; ++k) {
            const double tau = static_cast<double>(k) / (frames - 1);
            Tensor<S> lat = slerp(la, lb, tau);
            out[static_cast<size_t>(k)] =
                ddim_decode(lat, model, encode_steps, sched, GuidanceSpec<S>{});
        }
    });
    return out;
}

// Attribute editing: DDIM-encode the source, then decode with single-class
// guidance and the linearly decaying noise-injection schedule eta_t = t/N.
// eta_scale = 0 disables injection entirely (with lambda = 0 this is the
// plain deterministic round trip).
template <typename S>
inline Tensor<S> edit_attribute(const Tensor<S>& x, const Denoiser<S>& model,
                                const GuidanceGrad<S>& classifier, int target_category,
                                double lambda, int encode_steps, const NoiseSchedule& sched,
                                Rng rng, double eta_scale = 1.0) {
    require(encode_steps >= 1 && encode_steps <= sched.T(), "encode steps out of range");
    Tensor<S> latent = ddim_encode(x, model, encode_steps, sched);
    GuidanceSpec<S> spec;
    if (lambda != 0.0) spec.terms.push_back({&classifier, target_category, static_cast<S>(lambda)});
    std::vector<double> eta(static_cast<size_t>(encode_steps) + 1, 0.0);
    for (int t = 0; t <= encode_steps; ++t)
        eta[static_cast<size_t>(t)] = eta_scale * t / encode_steps;
    return ddim_decode(latent, model, encode_steps, sched, spec, eta.data(), &rng);
}

}  // namespace dzsi
