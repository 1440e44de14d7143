#pragma once

#include <functional>

#include "dzsi/nn.hpp"

// Test-only finite-difference oracle. Central differences in double
// precision against any scalar loss of the parameters; independent of the
// backward implementation it checks.
namespace testutil {

using dzsi::GradBuffer;
using dzsi::ParamSet;
using dzsi::Tensor;

inline double rel_err(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

// Overwrite every parameter (including zero-initialized branches) so the
// finite-difference sweep exercises all paths.
inline void randomize_params(ParamSet<double>& ps, dzsi::Rng& rng, double scale = 0.3) {
    for (auto& e : ps.entries)
        for (auto& w : e.w) w = rng.normal() * scale;
}

// Max relative error of `analytic` against central differences of `loss`
// over every parameter coordinate.
inline double max_param_grad_rel_err(ParamSet<double>& ps, const GradBuffer<double>& analytic,
                                     const std::function<double()>& loss, double h = 1e-4) {
    double worst = 0.0;
    for (size_t p = 0; p < ps.entries.size(); ++p) {
        auto& w = ps.entries[p].w;
        for (size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double up = loss();
            w[i] = keep - h;
            const double dn = loss();
            w[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            worst = std::max(worst, rel_err(fd, analytic.g[p][i]));
        }
    }
    return worst;
}

// Same check for the gradient with respect to an input tensor.
inline double max_input_grad_rel_err(Tensor<double>& x, const Tensor<double>& analytic,
                                     const std::function<double()>& loss, double h = 1e-4) {
    double worst = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = loss();
        x[i] = keep - h;
        const double dn = loss();
        x[i] = keep;
        const double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, rel_err(fd, analytic[i]));
    }
    return worst;
}

}  // namespace testutil
