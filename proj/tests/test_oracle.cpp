#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dzsi/oracle.hpp"

using namespace dzsi;

namespace {

// Mass concentrated on the extreme bands [0, 0.2] and [0.8, 1].
MixtureModel two_sided_mixture() {
    MixtureModel m;
    m.means = {0.1, 0.9};
    m.var = 0.05 * 0.05;
    m.weights = {0.5, 0.5};
    m.category = {0, 1};
    return m;
}

// Slightly wider components for the guided product-matching gate: the
// lambda-weighted product stays resolvable on a 100-bin histogram.
MixtureModel guided_gate_mixture() {
    MixtureModel m = two_sided_mixture();
    m.var = 0.07 * 0.07;
    return m;
}

}  // namespace

TEST_CASE("diffused mixture closed form") {
    auto sched = make_schedule(ScheduleFamily::Cosine, 100, 0.008);
    auto mix = two_sided_mixture();

    SUBCASE("t = 0 unchanged") {
        auto d = diffused_mixture(mix, 0, sched);
        CHECK(d.means[0] == mix.means[0]);
        CHECK(d.var == mix.var);
    }

    SUBCASE("late t approaches the standard normal") {
        auto d = diffused_mixture(mix, 100, sched);
        CHECK(std::abs(d.means[0]) < 0.05);
        CHECK(d.var == doctest::Approx(1.0).epsilon(0.01));
    }

    SUBCASE("variance follows the law of total variance exactly") {
        for (int t : {1, 25, 50, 99}) {
            auto d = diffused_mixture(mix, t, sched);
            double ab = sched.alpha_bar[t];
            CHECK(d.variance() ==
                  doctest::Approx(ab * mix.variance() + (1 - ab)).epsilon(1e-9));
        }
    }

    SUBCASE("density matches Monte-Carlo q_sample histogram") {
        const int t = 40;
        auto d = diffused_mixture(mix, t, sched);
        Rng rng(7);
        std::vector<double> draws;
        draws.reserve(100000);
        for (int i = 0; i < 100000; ++i) {
            double comp = rng.uniform() < 0.5 ? 0 : 1;
            double x0 = mix.means[static_cast<size_t>(comp)] +
                        std::sqrt(mix.var) * rng.normal();
            Tensor<double> X({1}, {x0}), E({1}, {rng.normal()});
            draws.push_back(q_sample(X, t, E, sched)[0]);
        }
        GridDensity g = mixture_density_grid(d, -4.0, 5.0, 4096);
        CHECK(tv_distance(draws, g, 100) < 0.02);
    }
}

TEST_CASE("mixture score and posterior") {
    auto mix = two_sided_mixture();

    SUBCASE("symmetry at the midpoint") {
        CHECK(mixture_score(mix, 0.5) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(analytic_posterior(mix, 0.5) == doctest::Approx(0.5).epsilon(1e-9));
    }

    SUBCASE("single gaussian score is -(x - mu)/var") {
        MixtureModel g;
        g.means = {0.3};
        g.var = 0.2;
        g.weights = {1.0};
        g.category = {1};
        for (double x : {-1.0, 0.0, 0.7})
            CHECK(mixture_score(g, x) == doctest::Approx(-(x - 0.3) / 0.2).epsilon(1e-12));
    }

    SUBCASE("score and posterior gradient match finite differences") {
        for (double x : {0.05, 0.3, 0.5, 0.72, 1.1}) {
            double h = 1e-6;
            double fd = (mixture_log_density(mix, x + h) - mixture_log_density(mix, x - h)) /
                        (2 * h);
            CHECK(std::abs(mixture_score(mix, x) - fd) /
                      std::max(std::abs(fd), 1e-6) < 1e-6);
            double fdp = (std::log(analytic_posterior(mix, x + h)) -
                          std::log(analytic_posterior(mix, x - h))) /
                         (2 * h);
            CHECK(std::abs(analytic_posterior_grad(mix, x, 1) - fdp) /
                      std::max(std::abs(fdp), 1e-4) < 1e-5);
        }
    }

    SUBCASE("posterior pair sums to one and stays in (0,1)") {
        for (double x : {-0.3, 0.0, 0.4, 0.9, 1.4}) {
            double pr = analytic_posterior(mix, x);
            MixtureModel flipped = mix;
            flipped.category = {1, 0};
            double pl = analytic_posterior(flipped, x);
            CHECK(pr + pl == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(pr > 0.0);
            CHECK(pr < 1.0);
        }
    }
}

TEST_CASE("product density grid") {
    auto mix = two_sided_mixture();

    SUBCASE("lambda zero returns the original density") {
        auto g = product_density_grid(mix, 0.0, 0.0, -0.5, 1.5, 2048);
        // compare a few points against the normalized mixture density
        for (double x : {0.1, 0.5, 0.9}) {
            size_t i = static_cast<size_t>((x - g.lo) / g.dx());
            CHECK(g.values[i] == doctest::Approx(mixture_density(mix, g.lo + i * g.dx()))
                                     .epsilon(1e-3));
        }
        CHECK(g.integral() == doctest::Approx(1.0).epsilon(1e-6));
    }

    SUBCASE("product of two unit gaussians is N(0, 1/2)") {
        // sanity identity exercised through the same log-space product path
        GridDensity g;
        g.lo = -6;
        g.hi = 6;
        g.values.resize(4096);
        for (size_t i = 0; i < g.values.size(); ++i) {
            double x = g.lo + (g.hi - g.lo) * i / (g.values.size() - 1);
            double lp = -0.5 * x * x - 0.5 * std::log(2 * 3.14159265358979323846);
            g.values[i] = std::exp(lp + lp);
        }
        g.normalize();
        // variance of the normalized product
        double mean = 0, var = 0;
        for (size_t i = 0; i + 1 < g.values.size(); ++i) {
            double x = g.lo + (g.hi - g.lo) * i / (g.values.size() - 1);
            mean += x * g.values[i] * g.dx();
        }
        for (size_t i = 0; i + 1 < g.values.size(); ++i) {
            double x = g.lo + (g.hi - g.lo) * i / (g.values.size() - 1);
            var += (x - mean) * (x - mean) * g.values[i] * g.dx();
        }
        CHECK(var == doctest::Approx(0.5).epsilon(1e-3));
    }

    SUBCASE("symmetric lambdas concentrate relative mass at the midpoint") {
        auto base = product_density_grid(mix, 0.0, 0.0, -0.5, 1.5, 4096);
        auto prod = product_density_grid(mix, 5.0, 5.0, -0.5, 1.5, 4096);
        auto value_at = [&](const GridDensity& g, double x) {
            size_t i = static_cast<size_t>((x - g.lo) / g.dx());
            return g.values[i];
        };
        CHECK(value_at(prod, 0.5) / value_at(base, 0.5) > 10.0);
        // symmetric about the midpoint
        for (double d : {0.1, 0.2, 0.3})
            CHECK(value_at(prod, 0.5 - d) ==
                  doctest::Approx(value_at(prod, 0.5 + d)).epsilon(0.02));
    }
}

TEST_CASE("tv distance properties") {
    auto mix = two_sided_mixture();
    auto g = mixture_density_grid(mix, -0.5, 1.5, 2048);

    SUBCASE("samples from the density itself converge") {
        Rng rng(3);
        std::vector<double> draws;
        for (int i = 0; i < 100000; ++i) {
            double comp = rng.uniform() < 0.5 ? 0 : 1;
            draws.push_back(mix.means[static_cast<size_t>(comp)] +
                            std::sqrt(mix.var) * rng.normal());
        }
        CHECK(tv_distance(draws, g, 100) <= 0.03);
    }

    SUBCASE("disjoint support gives TV 1") {
        std::vector<double> far(1000, 40.0);
        GridDensity local = mixture_density_grid(mix, -0.5, 1.5, 512);
        // samples clamp into the last bin; density mass there is ~0
        double tv = tv_distance(far, local, 100);
        CHECK(tv > 0.99);
        CHECK(tv <= 1.0 + 1e-12);
    }
}

TEST_CASE("oracle sampler gates") {
    auto sched = make_schedule(ScheduleFamily::Cosine, 1000, 0.008);
    SampleOptions opt;
    auto mid_mass = [](const std::vector<double>& xs) {
        int n = 0;
        for (double x : xs)
            if (x > 0.2 && x < 0.8) ++n;
        return static_cast<double>(n) / xs.size();
    };

    SUBCASE("unguided ancestral sampling matches p(x): TV < 0.05") {
        auto mix = two_sided_mixture();
        auto xs = oracle_sample(mix, sched, 0.0, 0.0, 10000, opt, 1234);
        auto g = mixture_density_grid(mix, -0.5, 1.5, 4096);
        double tv = tv_distance(xs, g, 100);
        CAPTURE(tv);
        CHECK(tv < 0.05);
        CHECK(mid_mass(xs) < 0.05);
    }

    SUBCASE("guided sampling matches the product density for small lambda") {
        auto mix = guided_gate_mixture();
        for (double lam : {1.0, 5.0}) {
            auto xs = oracle_sample(mix, sched, lam, lam, 10000, opt, 99);
            auto g = product_density_grid(mix, lam, lam, -0.5, 1.5, 4096);
            double tv = tv_distance(xs, g, 100);
            CAPTURE(lam);
            CAPTURE(tv);
            CHECK(tv < 0.08);
        }
    }

    SUBCASE("lambda 30 on both sides moves most mass to the middle") {
        auto mix = two_sided_mixture();
        auto guided = oracle_sample(mix, sched, 30.0, 30.0, 10000, opt, 6);
        CHECK(mid_mass(guided) >= 0.5);
        // large-lambda product mismatch is a reported diagnostic, not a gate
        auto g = product_density_grid(mix, 30.0, 30.0, -0.5, 1.5, 4096);
        MESSAGE("lambda=30 product TV (diagnostic): ", tv_distance(guided, g, 100));
    }
}
