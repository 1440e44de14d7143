#pragma once

#include <cmath>
#include <vector>

#include "dzsi/samplers.hpp"

namespace dzsi {

// 1-D Gaussian mixture with shared component variance and a left/right
// category per component. Closed-form diffusion, scores and posteriors make
// it a zero-training stand-in for the learned models.
struct MixtureModel {
    std::vector<double> means;
    double var = 1.0;  // shared sigma^2
    std::vector<double> weights;
    std::vector<int> category;  // 0 = left, 1 = right

    void validate() const {
        require_config(var > 0.0, "mixture needs positive variance");
        require_config(!means.empty() && means.size() == weights.size() &&
                           means.size() == category.size(),
                       "mixture component lists must align");
        double wsum = 0.0;
        for (double w : weights) {
            require_config(w > 0.0, "mixture weights must be positive");
            wsum += w;
        }
        require_config(std::abs(wsum - 1.0) < 1e-9, "mixture weights must sum to 1");
    }

    double mean() const {
        double m = 0.0;
        for (size_t i = 0; i < means.size(); ++i) m += weights[i] * means[i];
        return m;
    }

    double variance() const {
        double m = mean(), v = var;
        for (size_t i = 0; i < means.size(); ++i) v += weights[i] * (means[i] - m) * (means[i] - m);
        return v;
    }
};

namespace detail {

inline double log_normal_pdf(double x, double mu, double var) {
    const double d = x - mu;
    return -0.5 * (std::log(2.0 * 3.14159265358979323846 * var) + d * d / var);
}

}  // namespace detail

// Pushforward of the mixture through t corruption steps: component i becomes
// N(sqrt(ab_t) mu_i, ab_t sigma^2 + 1 - ab_t).
inline MixtureModel diffused_mixture(const MixtureModel& mix, int t, const NoiseSchedule& sched) {
    require(t >= 0 && t <= sched.T(), "diffused_mixture: t out of [0, T]");
    mix.validate();
    const double ab = sched.alpha_bar[static_cast<size_t>(t)];
    MixtureModel out = mix;
    out.var = ab * mix.var + (1.0 - ab);
    for (auto& m : out.means) m *= std::sqrt(ab);
    return out;
}

inline double mixture_log_density(const MixtureModel& mix, double x) {
    double best = -1e300;
    std::vector<double> lw(mix.means.size());
    for (size_t i = 0; i < mix.means.size(); ++i) {
        lw[i] = std::log(mix.weights[i]) + detail::log_normal_pdf(x, mix.means[i], mix.var);
        best = std::max(best, lw[i]);
    }
    double acc = 0.0;
    for (double l : lw) acc += std::exp(l - best);
    return best + std::log(acc);
}

inline double mixture_density(const MixtureModel& mix, double x) {
    return std::exp(mixture_log_density(mix, x));
}

// grad_x log p(x): responsibility-weighted component scores.
inline double mixture_score(const MixtureModel& mix, double x) {
    double lz = mixture_log_density(mix, x);
    double acc = 0.0;
    for (size_t i = 0; i < mix.means.size(); ++i) {
        double r = std::exp(std::log(mix.weights[i]) +
                            detail::log_normal_pdf(x, mix.means[i], mix.var) - lz);
        acc += r * (-(x - mix.means[i]) / mix.var);
    }
    return acc;
}

// p(category = 1 | x): responsibility mass of the right-category components.
inline double analytic_posterior(const MixtureModel& mix, double x) {
    double lz = mixture_log_density(mix, x);
    double acc = 0.0;
    for (size_t i = 0; i < mix.means.size(); ++i) {
        if (mix.category[i] != 1) continue;
        acc += std::exp(std::log(mix.weights[i]) +
                        detail::log_normal_pdf(x, mix.means[i], mix.var) - lz);
    }
    return std::min(std::max(acc, 1e-300), 1.0 - 1e-16);
}

// d/dx log p(category | x) = score of the category-restricted mixture minus
// the full mixture score.
inline double analytic_posterior_grad(const MixtureModel& mix, double x, int cat) {
    MixtureModel sub;
    sub.var = mix.var;
    double wsum = 0.0;
    for (size_t i = 0; i < mix.means.size(); ++i)
        if (mix.category[i] == cat) wsum += mix.weights[i];
    require(wsum > 0.0, "category has no mixture mass");
    for (size_t i = 0; i < mix.means.size(); ++i) {
        if (mix.category[i] != cat) continue;
        sub.means.push_back(mix.means[i]);
        sub.weights.push_back(mix.weights[i] / wsum);
        sub.category.push_back(cat);
    }
    return mixture_score(sub, x) - mixture_score(mix, x);
}

// Analytic denoiser: eps_hat(x_t, t) = -sqrt(1 - ab_t) * score_t(x_t).
template <typename S>
class MixtureDenoiser : public Denoiser<S> {
  public:
    MixtureDenoiser(MixtureModel mix, const NoiseSchedule& sched)
        : mix_(std::move(mix)), sched_(sched) {
        mix_.validate();
        diffused_.reserve(static_cast<size_t>(sched.T()) + 1);
        for (int t = 0; t <= sched.T(); ++t) diffused_.push_back(diffused_mixture(mix_, t, sched));
    }

    void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const override {
        require(x.size() == 1, "mixture denoiser is 1-D");
        (void)v;
        const double ab = sched_.alpha_bar[static_cast<size_t>(t)];
        const double s = mixture_score(diffused_.at(static_cast<size_t>(t)),
                                       static_cast<double>(x[0]));
        eps = Tensor<S>({1});
        eps[0] = static_cast<S>(-std::sqrt(1.0 - ab) * s);
    }

    bool has_v_head() const override { return false; }

    const MixtureModel& at(int t) const { return diffused_.at(static_cast<size_t>(t)); }

  private:
    MixtureModel mix_;
    NoiseSchedule sched_;
    std::vector<MixtureModel> diffused_;
};

// Analytic guidance classifier over the diffused posteriors.
template <typename S>
class MixturePosteriorGrad : public GuidanceGrad<S> {
  public:
    MixturePosteriorGrad(MixtureModel mix, const NoiseSchedule& sched) : sched_(sched) {
        mix.validate();
        diffused_.reserve(static_cast<size_t>(sched.T()) + 1);
        for (int t = 0; t <= sched.T(); ++t) diffused_.push_back(diffused_mixture(mix, t, sched));
    }

    Tensor<S> grad_logp(const Tensor<S>& x, int t, int category) const override {
        require(x.size() == 1, "mixture posterior grad is 1-D");
        Tensor<S> g({1});
        g[0] = static_cast<S>(analytic_posterior_grad(diffused_.at(static_cast<size_t>(t)),
                                                      static_cast<double>(x[0]), category));
        return g;
    }

    int categories() const override { return 2; }

  private:
    NoiseSchedule sched_;
    std::vector<MixtureModel> diffused_;
};

// Normalized density tabulated on a uniform grid; trapezoid integral 1.
struct GridDensity {
    double lo = 0.0, hi = 1.0;
    std::vector<double> values;

    double dx() const { return (hi - lo) / static_cast<double>(values.size() - 1); }

    double integral() const {
        double acc = 0.0;
        for (size_t i = 0; i + 1 < values.size(); ++i) acc += 0.5 * (values[i] + values[i + 1]);
        return acc * dx();
    }

    void normalize() {
        double z = integral();
        if (!(z > 0.0) || !std::isfinite(z)) throw numeric_error("grid density underflow");
        for (auto& v : values) v /= z;
    }

    // integral over [a, b] of the piecewise-linear interpolant
    double integrate(double a, double b) const {
        a = std::max(a, lo);
        b = std::min(b, hi);
        if (b <= a) return 0.0;
        const double h = dx();
        auto value_at = [&](double x) {
            double u = (x - lo) / h;
            auto i = static_cast<size_t>(std::min(std::max(u, 0.0),
                                                  static_cast<double>(values.size() - 2)));
            double f = u - static_cast<double>(i);
            return values[i] * (1.0 - f) + values[i + 1] * f;
        };
        // composite trapezoid on a fine sub-grid aligned with the knots
        int steps = static_cast<int>(std::ceil((b - a) / h)) * 2 + 1;
        double acc = 0.0;
        double prev = value_at(a);
        for (int k = 1; k <= steps; ++k) {
            double x = a + (b - a) * k / steps;
            double cur = value_at(x);
            acc += 0.5 * (prev + cur) * (b - a) / steps;
            prev = cur;
        }
        return acc;
    }
};

// Grid density proportional to p(x) p(left|x)^l_left p(right|x)^l_right.
inline GridDensity product_density_grid(const MixtureModel& mix, double lambda_left,
                                        double lambda_right, double lo, double hi,
                                        int resolution = 2048) {
    mix.validate();
    require_config(resolution >= 16 && hi > lo, "bad product grid");
    GridDensity g;
    g.lo = lo;
    g.hi = hi;
    g.values.resize(static_cast<size_t>(resolution));
    std::vector<double> logv(static_cast<size_t>(resolution));
    double best = -1e300;
    for (int i = 0; i < resolution; ++i) {
        double x = lo + (hi - lo) * i / (resolution - 1);
        double pr = analytic_posterior(mix, x);
        pr = std::min(std::max(pr, 1e-300), 1.0 - 1e-16);
        double lv = mixture_log_density(mix, x) + lambda_right * std::log(pr) +
                    lambda_left * std::log1p(-pr);
        logv[static_cast<size_t>(i)] = lv;
        best = std::max(best, lv);
    }
    if (best < -650.0) throw numeric_error("product density underflows everywhere on the grid");
    for (int i = 0; i < resolution; ++i)
        g.values[static_cast<size_t>(i)] = std::exp(logv[static_cast<size_t>(i)] - best);
    g.normalize();
    return g;
}

inline GridDensity mixture_density_grid(const MixtureModel& mix, double lo, double hi,
                                        int resolution = 2048) {
    return product_density_grid(mix, 0.0, 0.0, lo, hi, resolution);
}

// Total variation between binned samples and the binned grid density.
inline double tv_distance(const std::vector<double>& samples, const GridDensity& density,
                          int bins) {
    require(!samples.empty() && bins >= 1, "tv_distance needs samples and bins");
    std::vector<double> counts(static_cast<size_t>(bins), 0.0);
    const double w = (density.hi - density.lo) / bins;
    for (double s : samples) {
        int b = static_cast<int>(std::floor((s - density.lo) / w));
        b = std::min(std::max(b, 0), bins - 1);
        counts[static_cast<size_t>(b)] += 1.0;
    }
    double tv = 0.0;
    for (int b = 0; b < bins; ++b) {
        double p_hat = counts[static_cast<size_t>(b)] / static_cast<double>(samples.size());
        double q = density.integrate(density.lo + b * w, density.lo + (b + 1) * w);
        tv += std::abs(p_hat - q);
    }
    return 0.5 * tv;
}

// Full sampler run with analytic scores and analytic posterior gradients in
// place of learned nets; the diffusion and guidance code paths are the same
// ones learned models go through.
template <typename S = double>
inline std::vector<double> oracle_sample(const MixtureModel& mix, const NoiseSchedule& sched,
                                         double lambda_left, double lambda_right, int n,
                                         const SampleOptions& opt, uint64_t seed) {
    MixtureDenoiser<S> den(mix, sched);
    MixturePosteriorGrad<S> grad(mix, sched);
    GuidanceSpec<S> spec;
    if (lambda_left != 0.0)
        spec.terms.push_back({&grad, 0, static_cast<S>(lambda_left)});
    if (lambda_right != 0.0)
        spec.terms.push_back({&grad, 1, static_cast<S>(lambda_right)});
    SampleOptions o = opt;
    o.clip_output = false;  // mixture support is not the image range
    o.clip_x0 = false;
    o.variance = VarianceMode::FixedBetaTilde;
    auto out = sample<S>(den, n, sched, o, spec, Rng(seed), {1});
    std::vector<double> xs(out.size());
    for (size_t i = 0; i < out.size(); ++i) xs[i] = static_cast<double>(out[i][0]);
    return xs;
}

}  // namespace dzsi
