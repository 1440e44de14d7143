#pragma once

#include <cmath>
#include <vector>

#include "dzsi/nn.hpp"

namespace dzsi {

// Adam with bias-corrected moments. A step with any non-finite gradient is
// rejected wholesale (state and parameters untouched).
template <typename S>
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::vector<std::vector<S>> m, v;

    explicit AdamState(const ParamSet<S>& ps, double lr_ = 1e-4) : lr(lr_) {
        m.reserve(ps.entries.size());
        v.reserve(ps.entries.size());
        for (const auto& e : ps.entries) {
            m.emplace_back(e.w.size(), S(0));
            v.emplace_back(e.w.size(), S(0));
        }
    }
};

template <typename S>
inline void adam_step(AdamState<S>& opt, ParamSet<S>& params, const GradBuffer<S>& grads) {
    require(grads.g.size() == params.entries.size(), "adam: grad/param layout mismatch");
    if (!grads.all_finite()) throw numeric_error("adam: non-finite gradient at step " +
                                                 std::to_string(opt.step + 1));
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
    for (size_t p = 0; p < params.entries.size(); ++p) {
        auto& w = params.entries[p].w;
        const auto& g = grads.g[p];
        auto& m = opt.m[p];
        auto& v = opt.v[p];
        for (size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = opt.beta1 * static_cast<double>(m[i]) + (1.0 - opt.beta1) * gi;
            const double vi = opt.beta2 * static_cast<double>(v[i]) + (1.0 - opt.beta2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            w[i] = static_cast<S>(static_cast<double>(w[i]) -
                                  opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    }
}

// ema' = rate * ema + (1 - rate) * params, elementwise.
template <typename S>
inline void ema_update(ParamSet<S>& ema, const ParamSet<S>& params, double rate) {
    require(rate >= 0.0 && rate <= 1.0, "ema rate must be in [0, 1]");
    require(ema.entries.size() == params.entries.size(), "ema layout mismatch");
    for (size_t p = 0; p < ema.entries.size(); ++p) {
        auto& e = ema.entries[p].w;
        const auto& w = params.entries[p].w;
        require(e.size() == w.size(), "ema layout mismatch");
        for (size_t i = 0; i < e.size(); ++i)
            e[i] = static_cast<S>(rate * static_cast<double>(e[i]) +
                                  (1.0 - rate) * static_cast<double>(w[i]));
    }
}

// Persistent left singular vector estimate for one weight matrix. The
// estimator iterates a rank-2 subspace (the tracked direction plus one
// auxiliary column) so clustered top singular values still converge fast;
// u stays the unit-norm top left singular vector estimate.
template <typename S>
struct SpectralState {
    std::vector<S> u;
    std::vector<double> sub;   // 2 right-space columns, cols x 2, column-major
    bool zero_weight = false;  // set when normalize saw an all-zero matrix
};

namespace detail {

// Treats an arbitrary weight tensor as a (rows, cols) matrix: conv kernels
// {3,3,Ci,Co} fold to (Co, 9*Ci), dense weights {O,I} stay (O, I).
inline std::pair<int, int> spectral_matrix_dims(const std::vector<int>& shape) {
    if (shape.size() == 2) return {shape[0], shape[1]};
    if (shape.size() == 4) return {shape[3], shape[0] * shape[1] * shape[2]};
    int64_t n = 1;
    for (size_t i = 1; i < shape.size(); ++i) n *= shape[i];
    return {shape[0], static_cast<int>(n)};
}

// W is stored with `cols` as the slow index for conv ({...,Co} innermost),
// so matrix element (r, c) sits at c * rows + r in that case.
template <typename S>
inline S spectral_at(const std::vector<S>& w, const std::vector<int>& shape, int rows, int r,
                     int c) {
    if (shape.size() == 4) return w[static_cast<size_t>(c) * rows + r];
    return w[static_cast<size_t>(r) * (w.size() / rows) + c];
}

}  // namespace detail

// One or more subspace-iteration sweeps with persistent state; returns the
// top singular value estimate without modifying W.
template <typename S>
inline double spectral_sigma(const std::vector<S>& w, const std::vector<int>& shape,
                             SpectralState<S>& state, int iters = 1) {
    auto [rows, cols] = detail::spectral_matrix_dims(shape);
    const auto uc = static_cast<size_t>(cols);
    if (state.sub.size() != 2 * uc) {
        // dense deterministic start so the overlap with the top singular
        // directions is bounded away from zero
        Rng rng(0x5350454354u ^ (static_cast<uint64_t>(rows) << 20) ^ static_cast<uint64_t>(cols));
        state.sub.assign(2 * uc, 0.0);
        for (auto& x : state.sub) x = rng.normal();
    }
    auto matvec = [&](const double* v, std::vector<double>& out) {  // out = W v
        out.assign(static_cast<size_t>(rows), 0.0);
        for (int r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (int c = 0; c < cols; ++c)
                acc += static_cast<double>(detail::spectral_at(w, shape, rows, r, c)) * v[c];
            out[static_cast<size_t>(r)] = acc;
        }
    };
    auto matvec_t = [&](const std::vector<double>& v, double* out) {  // out = W^T v
        for (int c = 0; c < cols; ++c) out[c] = 0.0;
        for (int r = 0; r < rows; ++r) {
            const double vr = v[static_cast<size_t>(r)];
            for (int c = 0; c < cols; ++c)
                out[c] += static_cast<double>(detail::spectral_at(w, shape, rows, r, c)) * vr;
        }
    };
    auto orthonormalize = [&](std::vector<double>& sub) -> bool {
        double n0 = 0.0;
        for (size_t c = 0; c < uc; ++c) n0 += sub[c] * sub[c];
        n0 = std::sqrt(n0);
        if (n0 == 0.0) return false;
        for (size_t c = 0; c < uc; ++c) sub[c] /= n0;
        double proj = 0.0;
        for (size_t c = 0; c < uc; ++c) proj += sub[c] * sub[uc + c];
        double n1 = 0.0;
        for (size_t c = 0; c < uc; ++c) {
            sub[uc + c] -= proj * sub[c];
            n1 += sub[uc + c] * sub[uc + c];
        }
        n1 = std::sqrt(n1);
        if (n1 < 1e-300) {  // degenerate second column: re-seed it
            Rng rng(0xA5A5 + static_cast<uint64_t>(rows));
            n1 = 0.0;
            for (size_t c = 0; c < uc; ++c) {
                sub[uc + c] = rng.normal();
                n1 += sub[uc + c] * sub[uc + c];
            }
            n1 = std::sqrt(n1);
        }
        for (size_t c = 0; c < uc; ++c) sub[uc + c] /= n1;
        return true;
    };
    if (!orthonormalize(state.sub)) return 0.0;
    std::vector<double> t0, t1;
    for (int it = 0; it < iters; ++it) {
        matvec(state.sub.data(), t0);
        matvec(state.sub.data() + uc, t1);
        matvec_t(t0, state.sub.data());
        matvec_t(t1, state.sub.data() + uc);
        if (!orthonormalize(state.sub)) return 0.0;
    }
    // Ritz values of W^T W on the 2-dim subspace
    matvec(state.sub.data(), t0);
    matvec(state.sub.data() + uc, t1);
    double a = 0.0, b = 0.0, d = 0.0;
    for (int r = 0; r < rows; ++r) {
        a += t0[static_cast<size_t>(r)] * t0[static_cast<size_t>(r)];
        b += t0[static_cast<size_t>(r)] * t1[static_cast<size_t>(r)];
        d += t1[static_cast<size_t>(r)] * t1[static_cast<size_t>(r)];
    }
    const double tr = a + d;
    const double disc = std::sqrt(std::max((a - d) * (a - d) + 4 * b * b, 0.0));
    const double lam = 0.5 * (tr + disc);
    const double sigma = std::sqrt(std::max(lam, 0.0));
    if (sigma == 0.0) return 0.0;
    // expose the unit-norm left singular vector estimate
    state.u.assign(static_cast<size_t>(rows), S(0));
    // top eigenvector of the 2x2 Ritz matrix
    double ex = b, ey = lam - a;
    if (std::abs(ex) + std::abs(ey) < 1e-300) {
        ex = 1.0;
        ey = 0.0;
    }
    const double en = std::sqrt(ex * ex + ey * ey);
    ex /= en;
    ey /= en;
    double un = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double val = ex * t0[static_cast<size_t>(r)] + ey * t1[static_cast<size_t>(r)];
        state.u[static_cast<size_t>(r)] = static_cast<S>(val);
        un += val * val;
    }
    un = std::sqrt(un);
    if (un > 0.0)
        for (auto& x : state.u) x = static_cast<S>(static_cast<double>(x) / un);
    return sigma;
}

// Divides W by its estimated top singular value in place (projection onto
// the sigma = 1 sphere). An all-zero matrix is returned unchanged with the
// state flagged.
template <typename S>
inline double spectral_normalize(std::vector<S>& w, const std::vector<int>& shape,
                                 SpectralState<S>& state, int iters = 1) {
    double sigma = spectral_sigma(w, shape, state, iters);
    if (sigma == 0.0) {
        state.zero_weight = true;
        return 0.0;
    }
    state.zero_weight = false;
    for (auto& x : w) x = static_cast<S>(static_cast<double>(x) / sigma);
    return sigma;
}

// Per-model collection of spectral states keyed by parameter id.
template <typename S>
struct SpectralSet {
    std::vector<int> ids;
    std::vector<SpectralState<S>> states;

    explicit SpectralSet(std::vector<int> weight_ids) : ids(std::move(weight_ids)) {
        states.resize(this->ids.size());
    }
    SpectralSet() = default;

    void project(ParamSet<S>& ps, int iters = 1) {
        for (size_t i = 0; i < ids.size(); ++i) {
            auto& e = ps.at(ids[i]);
            spectral_normalize(e.w, e.shape, states[i], iters);
        }
    }

    double max_sigma_deviation(const ParamSet<S>& ps, int iters = 30) {
        double worst = 0.0;
        for (size_t i = 0; i < ids.size(); ++i) {
            const auto& e = ps.at(ids[i]);
            SpectralState<S> probe;
            double sig = spectral_sigma(e.w, e.shape, probe, iters);
            worst = std::max(worst, std::abs(sig - 1.0));
        }
        return worst;
    }
};

}  // namespace dzsi
