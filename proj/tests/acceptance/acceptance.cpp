// Acceptance suite: runs every gate at its stated tolerance and prints one
// PASS/FAIL line per criterion. Heavy criteria reuse the checkpoint trained
// for the zero-shot interpolation gate, mirroring the pipeline the CLI runs.

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dzsi/harness.hpp"
#include "../test_util.hpp"

using namespace dzsi;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
    std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", criterion, what.c_str());
    std::fflush(stdout);
    if (!pass) g_failures += 1;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. Chernoff reproduction
// ---------------------------------------------------------------------------
void criterion_1() {
    const double p = std::pow(0.15, 5);
    const double b10 = chernoff_bound(60000, p, 10);
    const double b15 = chernoff_bound(60000, p, 15);
    const double b20 = chernoff_bound(60000, p, 20);
    const bool ok10 = std::abs(b10 - 0.089) <= 0.002;
    const bool ok15 = b15 >= 5e-4 / 1.5 && b15 <= 5e-4 * 1.5;
    const bool ok20 = b20 >= 7.2e-7 / 1.5 && b20 <= 7.2e-7 * 1.5;
    report(1, ok10 && ok15 && ok20,
           fmt("chernoff bounds: P(X>=10)=%.4f (0.089 +/- 0.002), P(X>=15)=%.2e (5e-4 x1.5), "
               "P(X>=20)=%.2e (7.2e-7 x1.5)",
               b10, b15, b20));
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness: 100 randomized cases over every layer type
// ---------------------------------------------------------------------------
void criterion_2() {
    Rng master(20240808);
    double worst = 0.0;
    int cases = 0;
    auto update = [&](double err) { worst = std::max(worst, err); };

    // vector denoisers (dense, silu, time embedding, residual stages,
    // context table, eps + v heads)
    for (int i = 0; i < 50; ++i) {
        Rng rng = master.fork(100 + static_cast<uint64_t>(i));
        ModelSpec spec;
        spec.modality = Modality::Vector;
        spec.input_shape = {rng.uniform_int(1, 5)};
        spec.hidden = {rng.uniform_int(4, 12)};
        spec.res_stages = rng.uniform_int(1, 3);
        spec.temb_dim = 2 * rng.uniform_int(2, 6);
        spec.head = i % 2 == 0 ? HeadKind::EpsV : HeadKind::Eps;
        spec.class_contexts = i % 3 == 0 ? 2 : 0;
        spec.schedule_T = 16;
        MlpDenoiser<double> net(spec, rng.next_u64());
        testutil::randomize_params(net.params(), rng);
        Tensor<double> x(spec.input_shape);
        rng.fill_normal(x);
        Tensor<double> pe(spec.input_shape), pv(spec.input_shape);
        rng.fill_normal(pe);
        rng.fill_normal(pv);
        const int t = rng.uniform_int(0, 16);
        const int ctx = spec.class_contexts > 0 ? rng.uniform_int(-1, 1) : -1;
        auto loss = [&]() {
            Tape<double> tape;
            auto out = net.forward(x, t, ctx, tape);
            double l = dot(out.eps, pe);
            if (spec.head == HeadKind::EpsV) l += dot(out.v, pv);
            return l;
        };
        Tape<double> tape;
        net.forward(x, t, ctx, tape);
        GradBuffer<double> gb(net.params());
        auto dx = net.backward(pe, spec.head == HeadKind::EpsV ? &pv : nullptr, tape, &gb);
        update(testutil::max_param_grad_rel_err(net.params(), gb, loss, 1e-5));
        update(testutil::max_input_grad_rel_err(x, dx, loss, 1e-5));
        cases += 1;
    }

    // image denoisers (conv stride 1/2, nearest upsample, skip adds,
    // channel-bias injection)
    for (int i = 0; i < 20; ++i) {
        Rng rng = master.fork(300 + static_cast<uint64_t>(i));
        ModelSpec spec;
        spec.modality = Modality::Image;
        spec.input_shape = {8, 8, 1};
        spec.hidden = {rng.uniform_int(2, 3)};
        spec.res_stages = rng.uniform_int(1, 2);
        spec.temb_dim = 8;
        spec.head = i % 2 == 0 ? HeadKind::EpsV : HeadKind::Eps;
        spec.schedule_T = 16;
        ConvDenoiser<double> net(spec, rng.next_u64());
        testutil::randomize_params(net.params(), rng);
        Tensor<double> x(spec.input_shape);
        rng.fill_normal(x);
        Tensor<double> pe(spec.input_shape), pv(spec.input_shape);
        rng.fill_normal(pe);
        rng.fill_normal(pv);
        const int t = rng.uniform_int(0, 16);
        auto loss = [&]() {
            Tape<double> tape;
            auto out = net.forward(x, t, tape);
            double l = dot(out.eps, pe);
            if (spec.head == HeadKind::EpsV) l += dot(out.v, pv);
            return l;
        };
        Tape<double> tape;
        net.forward(x, t, tape);
        GradBuffer<double> gb(net.params());
        auto dx = net.backward(pe, spec.head == HeadKind::EpsV ? &pv : nullptr, tape, &gb);
        update(testutil::max_param_grad_rel_err(net.params(), gb, loss, 1e-5));
        update(testutil::max_input_grad_rel_err(x, dx, loss, 1e-5));
        cases += 1;
    }

    // classifiers, both modalities, softmax-CE and scalar-regression heads
    for (int i = 0; i < 30; ++i) {
        Rng rng = master.fork(500 + static_cast<uint64_t>(i));
        ModelSpec spec;
        const bool image = i % 2 == 0;
        spec.modality = image ? Modality::Image : Modality::Vector;
        spec.input_shape =
            image ? std::vector<int>{8, 8, 1} : std::vector<int>{rng.uniform_int(2, 5)};
        spec.hidden = {image ? 2 : rng.uniform_int(4, 10)};
        spec.temb_dim = i % 3 == 0 ? 0 : 8;
        spec.head = i % 5 == 0 ? HeadKind::Scalar : HeadKind::Logits;
        spec.categories = rng.uniform_int(2, 4);
        spec.schedule_T = 16;
        ClassifierNet<double> net(spec, rng.next_u64());
        testutil::randomize_params(net.params(), rng);
        Tensor<double> x(spec.input_shape);
        rng.fill_normal(x);
        const int t = spec.temb_dim > 0 ? rng.uniform_int(0, 16) : 0;
        const int label = rng.uniform_int(0, spec.categories - 1);
        const double target = rng.uniform();
        auto loss = [&]() {
            Tape<double> tape;
            auto out = net.forward(x, t, tape);
            if (spec.head == HeadKind::Scalar) {
                const double d = out[0] - target;
                return d * d;
            }
            return cross_entropy(out, label, static_cast<Tensor<double>*>(nullptr));
        };
        Tape<double> tape;
        auto out = net.forward(x, t, tape);
        Tensor<double> dout;
        if (spec.head == HeadKind::Scalar) {
            dout = Tensor<double>({1});
            dout[0] = 2.0 * (out[0] - target);
        } else {
            cross_entropy(out, label, &dout);
        }
        GradBuffer<double> gb(net.params());
        auto dx = net.backward(dout, tape, &gb);
        update(testutil::max_param_grad_rel_err(net.params(), gb, loss, 1e-5));
        update(testutil::max_input_grad_rel_err(x, dx, loss, 1e-5));
        cases += 1;
    }

    report(2, worst < 1e-4 && cases == 100,
           fmt("finite-difference gradients (h=1e-5) over %d randomized models "
               "(param + input checks, double precision): max rel err %.3e < 1e-4",
               cases, worst));
}

// ---------------------------------------------------------------------------
// 3. Schedule and chain identities
// ---------------------------------------------------------------------------
void criterion_3() {
    bool ok = true;
    for (int T : {50, 250, 1000, 4000}) {
        auto s = make_schedule(ScheduleFamily::Cosine, T, 0.008);
        ok = ok && s.alpha_bar[0] == 1.0 && s.alpha_bar[static_cast<size_t>(T)] < 1e-3;
        for (int t = 1; t <= T; ++t) {
            ok = ok &&
                 s.alpha_bar[static_cast<size_t>(t)] < s.alpha_bar[static_cast<size_t>(t) - 1];
            ok = ok &&
                 s.beta_tilde[static_cast<size_t>(t)] <= s.beta[static_cast<size_t>(t)] + 1e-15;
        }
    }

    auto sched = make_schedule(ScheduleFamily::Cosine, 250, 0.008);
    Rng rng(33);
    double worst_mu = 0.0;
    for (int t = 1; t <= 250; ++t) {
        Tensor<double> x0({4}), eps({4});
        rng.fill_normal(x0);
        rng.fill_normal(eps);
        auto xt = q_sample(x0, t, eps, sched);
        auto mu = mu_from_eps(xt, t, eps, sched);
        auto post = posterior_mean_var(x0, xt, t, sched);
        for (int i = 0; i < 4; ++i) {
            double denom = std::max(std::abs(post.mean[i]), 1e-3);
            worst_mu = std::max(worst_mu, std::abs(mu[i] - post.mean[i]) / denom);
        }
    }
    ok = ok && worst_mu < 1e-5;

    // DDIM eta = 0 inverse identity: with the true noise, stepping down
    // reproduces q_sample at t_prev
    struct Fixed : Denoiser<double> {
        Tensor<double> value;
        void denoise(const Tensor<double>&, int, Tensor<double>& e,
                     Tensor<double>*) const override {
            e = value;
        }
        bool has_v_head() const override { return false; }
    } fixed;
    double worst_ddim = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        int t = rng.uniform_int(2, 250);
        int tp = rng.uniform_int(1, t - 1);
        Tensor<double> x0({2}), eps({2});
        rng.fill_normal(x0);
        rng.fill_normal(eps);
        auto xt = q_sample(x0, t, eps, sched);
        fixed.value = eps;
        auto out = ddim_step(xt, t, tp, fixed, 0.0, GuidanceSpec<double>{}, sched, nullptr);
        auto expect = q_sample(x0, tp, eps, sched);
        for (int i = 0; i < 2; ++i)
            worst_ddim = std::max(worst_ddim, std::abs(out[i] - expect[i]));
    }
    ok = ok && worst_ddim < 1e-9;

    report(3, ok,
           fmt("schedule invariants (4 T values), mu_from_eps==posterior mean (max rel %.2e "
               "< 1e-5), ddim eta=0 inverse identity (max abs %.2e)",
               worst_mu, worst_ddim));
}

// ---------------------------------------------------------------------------
// 4. Oracle sampler gate
// ---------------------------------------------------------------------------
void criterion_4() {
    auto sched = make_schedule(ScheduleFamily::Cosine, 1000, 0.008);
    MixtureModel extreme;
    extreme.means = {0.1, 0.9};
    extreme.var = 0.05 * 0.05;
    extreme.weights = {0.5, 0.5};
    extreme.category = {0, 1};
    MixtureModel wide = extreme;
    wide.var = 0.07 * 0.07;
    SampleOptions opt;
    auto mid_mass = [](const std::vector<double>& xs) {
        int n = 0;
        for (double x : xs)
            if (x > 0.2 && x < 0.8) ++n;
        return static_cast<double>(n) / xs.size();
    };

    auto xs = oracle_sample(extreme, sched, 0.0, 0.0, 10000, opt, 1234);
    const double tv0 = tv_distance(xs, mixture_density_grid(extreme, -0.5, 1.5, 4096), 100);
    const double unguided_mid = mid_mass(xs);

    auto g1 = oracle_sample(wide, sched, 1.0, 1.0, 10000, opt, 99);
    const double tv1 = tv_distance(g1, product_density_grid(wide, 1.0, 1.0, -0.5, 1.5, 4096), 100);
    auto g5 = oracle_sample(wide, sched, 5.0, 5.0, 10000, opt, 98);
    const double tv5 = tv_distance(g5, product_density_grid(wide, 5.0, 5.0, -0.5, 1.5, 4096), 100);

    auto guided30 = oracle_sample(extreme, sched, 30.0, 30.0, 10000, opt, 6);
    const double mid30 = mid_mass(guided30);
    const double tv30 =
        tv_distance(guided30, product_density_grid(extreme, 30.0, 30.0, -0.5, 1.5, 4096), 100);

    const bool ok = tv0 < 0.05 && tv1 < 0.08 && tv5 < 0.08 && mid30 >= 0.5 && unguided_mid < 0.05;
    report(4, ok,
           fmt("oracle gates (T=1000, 1e4 chains, 100 bins): unguided TV=%.4f (<0.05, mid "
               "%.3f<0.05), guided TV lam1=%.4f lam5=%.4f (<0.08), lam30 mid-mass=%.3f (>=0.5; "
               "TV=%.3f reported)",
               tv0, unguided_mid, tv1, tv5, mid30, tv30));
}

// ---------------------------------------------------------------------------
// 9. Metric suite
// ---------------------------------------------------------------------------
void criterion_9() {
    bool ok = true;
    AttributeHistogram uniform(20);
    for (int b = 0; b < 20; ++b)
        for (int k = 0; k < 7; ++k) uniform.add((b + 0.5) / 20.0);
    ok = ok && mse_to_uniform(uniform) == 0.0 && kld_to_uniform(uniform) == 0.0;

    AttributeHistogram point(20);
    for (int k = 0; k < 64; ++k) point.add(0.21);
    ok = ok && std::abs(kld_to_uniform(point) - std::log(20.0)) < 1e-12;

    AttributeHistogram edges(20);
    for (int k = 0; k < 32; ++k) {
        edges.add(0.0);
        edges.add(1.0);
    }
    ok = ok && std::abs(mse_to_uniform(edges) - 0.45) < 1e-12;
    ok = ok && std::abs(kld_to_uniform(edges) - std::log(10.0)) < 1e-12;

    Rng rng(77);
    double worst_excess = -1.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int B = rng.uniform_int(2, 40);
        AttributeHistogram h(B);
        const int n = rng.uniform_int(1, 50);
        for (int k = 0; k < n; ++k) h.add(rng.uniform());
        const double kld = kld_to_uniform(h);
        worst_excess = std::max(worst_excess, kld - std::log(static_cast<double>(B)));
        if (kld < -1e-12) ok = false;
    }
    ok = ok && worst_excess <= 1e-12;
    report(9, ok,
           fmt("metric suite: uniform->(0,0), point mass->ln B, edge split->(0.45, ln 10), "
               "KLD<=ln B over 1e4 random histograms (max excess %.1e)",
               worst_excess));
}

// ---------------------------------------------------------------------------
// 8. Filter soundness across 10 seeds
// ---------------------------------------------------------------------------
void criterion_8() {
    LatentSpec lsp;  // delta = 0.2
    int clean_runs = 0;
    bool precision_ok = true;
    for (int seed = 0; seed < 10; ++seed) {
        const bool image_run = seed >= 8;  // two heavier image-set runs
        LabeledSet pool, heldout;
        FilterConfig cfg;
        cfg.keep_per_side = 250;
        cfg.stage1_train.steps = 400;
        cfg.stage1_train.batch = 32;
        cfg.stage1_train.lr = 1e-3;
        if (image_run) {
            CircleDatasetConfig dc;
            pool = sample_circle_set(1200, lsp, dc, 9000 + static_cast<uint64_t>(seed));
            auto mild = sample_circle_set_uniform(300, dc, 9100 + static_cast<uint64_t>(seed));
            for (size_t i = 0; i < mild.size(); ++i) {
                pool.x.push_back(mild.x[i]);
                pool.z.push_back(mild.z[i]);
            }
            pool.generator = "contaminated-circle";
            heldout = sample_circle_set(256, lsp, dc, 9200 + static_cast<uint64_t>(seed));
        } else {
            pool = sample_interval_mixture(1600, lsp, 1, 8000 + static_cast<uint64_t>(seed));
            Rng rng(8100 + static_cast<uint64_t>(seed));
            for (int i = 0; i < 400; ++i) {
                double z = rng.uniform();
                Tensor<float> v({1});
                v[0] = static_cast<float>(2.0 * z - 1.0 + 0.02 * rng.normal());
                pool.x.push_back(v);
                pool.z.push_back({static_cast<float>(z)});
            }
            pool.generator = "contaminated-vector";
            heldout = sample_interval_mixture(300, lsp, 1, 8200 + static_cast<uint64_t>(seed));
        }
        cfg.member_train = cfg.stage1_train;
        auto out = ensemble_filter(pool, cfg, heldout, 7000 + static_cast<uint64_t>(seed));
        if (out.kept.leakage_free(lsp.delta)) clean_runs += 1;

        // recompute held-out precision at the chosen thresholds explicitly
        auto precision_at = [&](const std::vector<ProbFn>& fns, double tau) {
            int64_t asserted = 0, correct = 0;
            for (size_t i = 0; i < heldout.size(); ++i) {
                for (int c = 0; c < 2; ++c) {
                    bool all = true;
                    for (const auto& fn : fns)
                        if (fn(heldout.x[i])[static_cast<size_t>(c)] <= tau) {
                            all = false;
                            break;
                        }
                    if (all) {
                        asserted++;
                        if (c == heldout.label(i)) correct++;
                        break;
                    }
                }
            }
            return asserted > 0 ? static_cast<double>(correct) / static_cast<double>(asserted)
                                : -1.0;
        };
        precision_ok =
            precision_ok && precision_at({raw_prob_fn(out.stage1)}, out.report.tau1) == 1.0;
        std::vector<ProbFn> member_fns;
        for (const auto& m : out.members) member_fns.push_back(raw_prob_fn(m));
        precision_ok = precision_ok && precision_at(member_fns, out.report.tau2) == 1.0;
    }
    report(8, clean_runs == 10 && precision_ok,
           fmt("ensemble filter: %d/10 seeds kept zero mild samples (delta=0.2 ground truth); "
               "held-out precision exactly 1.0 at chosen thresholds: %s",
               clean_runs, precision_ok ? "yes" : "no"));
}

// ---------------------------------------------------------------------------
// 5/6/7/10/11: the desk-scale circle experiment and its reuses
// ---------------------------------------------------------------------------

ExperimentConfig acceptance_config(const std::string& run_dir) {
    ExperimentConfig cfg;
    cfg.kind = ExperimentKind::Circle1d;
    cfg.seed = 20240501;
    cfg.out_dir = run_dir;
    cfg.n_train = 5000;  // 5k extreme-only training images
    cfg.n_heldout = 512;
    cfg.image_size = 32;                                  // 32 x 32
    cfg.schedule = {ScheduleFamily::Cosine, 250, 0.008};  // T = 250
    cfg.denoiser_channels = 16;
    cfg.ddpm.steps = 20000;  // 20k training steps
    cfg.ddpm.batch = 64;
    cfg.classifier_train.steps = 8000;
    cfg.classifier_train.batch = 64;
    cfg.classifier_train.lr = 3e-4;
    cfg.eval_train.steps = 3000;
    cfg.eval_train.batch = 64;
    cfg.eval_train.lr = 1e-3;
    cfg.sample_n = 2000;  // 2k samples per arm
    cfg.lambda = 30.0;
    return cfg;
}

struct BigRunResult {
    double guided_accuracy = 0.0;
    double guided_anomalous = 1.0;
    double uncond_accuracy = 1.0;
    double uncond_anomalous = 1.0;
};

BigRunResult run_circle_pipeline(const ExperimentConfig& cfg, RunDir& run) {
    stage_gen_data(cfg, run);
    stage_train_ddpm(cfg, run);
    stage_train_classifier(cfg, run);
    stage_train_eval(cfg, run);
    stage_calibrate(cfg, run);

    SampleStageOptions uncond;
    uncond.name = "unconditional";
    stage_sample(cfg, run, uncond);
    SampleStageOptions guided;
    guided.name = "multi_guided";
    guided.guidance = {{"classifier", 0, cfg.lambda}, {"classifier", 1, cfg.lambda}};
    guided.seed_salt = 1;
    stage_sample(cfg, run, guided);

    stage_eval_histogram(cfg, run, "unconditional");
    stage_eval_histogram(cfg, run, "multi_guided");
    auto au = stage_eval_accuracy(cfg, run, "unconditional");
    auto ag = stage_eval_accuracy(cfg, run, "multi_guided");
    BigRunResult r;
    r.uncond_accuracy = au.at("accuracy").get<double>();
    r.uncond_anomalous = au.at("anomalous_fraction").get<double>();
    r.guided_accuracy = ag.at("accuracy").get<double>();
    r.guided_anomalous = ag.at("anomalous_fraction").get<double>();
    return r;
}

void criterion_5(const BigRunResult& r) {
    const bool ok =
        r.guided_accuracy >= 0.50 && r.uncond_accuracy <= 0.10 && r.guided_anomalous <= 0.15;
    report(5, ok,
           fmt("zero-shot interpolation (32x32, T=250, 20k steps, 5k images, lambda=30, 2k "
               "samples each): guided acc=%.3f (>=0.50), uncond acc=%.3f (<=0.10), guided "
               "anomalous=%.3f (<=0.15; uncond %.3f)",
               r.guided_accuracy, r.uncond_accuracy, r.guided_anomalous, r.uncond_anomalous));
}

void criterion_6(const ExperimentConfig& cfg, RunDir& run) {
    bool ok = true;
    std::string note = "lambda robustness (500 samples each):";
    for (double lam : {3.5, 10.0, 30.0, 50.0}) {
        SampleStageOptions so;
        char nm[32];
        std::snprintf(nm, sizeof(nm), "lam_%g", lam);
        so.name = nm;
        so.n = 500;
        so.guidance = {{"classifier", 0, lam}, {"classifier", 1, lam}};
        so.seed_salt = Rng::mix(static_cast<uint64_t>(lam * 100));
        stage_sample(cfg, run, so);
        auto acc = stage_eval_accuracy(cfg, run, so.name);
        const double a = acc.at("accuracy").get<double>();
        ok = ok && a >= 0.30;
        note += fmt(" lam=%g acc=%.3f", lam, a);
    }
    report(6, ok, note + " (each >= 0.30)");
}

void criterion_7(const ExperimentConfig& cfg, RunDir& run) {
    auto train = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto sched = make_schedule(cfg.schedule);
    int sn_smoother = 0;
    std::string note = "spectral-norm heatmap smoothness (plain vs sn):";
    for (int pair = 0; pair < 5; ++pair) {
        double smooth[2];
        for (int use_sn = 0; use_sn < 2; ++use_sn) {
            ModelSpec spec = cfg.classifier_spec();
            spec.spectral_norm = use_sn == 1;
            TrainOptions opt;
            opt.steps = 3000;
            opt.batch = 32;
            opt.lr = 1e-3;
            opt.seed = 555000 + static_cast<uint64_t>(pair);  // same seed within a pair
            opt.spectral_norm = spec.spectral_norm;
            auto cls = train_noisy_classifier(train, sched, spec, opt);
            auto prob_right = [&](const Tensor<float>& img) {
                Tape<float> tape;
                auto logits = cls.net->forward(img, 0, tape);
                return static_cast<double>(softmax(logits)[1]);
            };
            auto heat = classifier_heatmap(prob_right, 24, cfg.image_size, cfg.radius);
            smooth[use_sn] = heatmap_mid_smoothness(heat);
        }
        if (smooth[1] < smooth[0]) sn_smoother += 1;
        note += fmt(" [%.4f vs %.4f]", smooth[0], smooth[1]);
    }
    report(7, sn_smoother >= 4,
           note + fmt(" -> smoother with sn in %d/5 pairs (need >= 4)", sn_smoother));
}

void criterion_10(const ExperimentConfig& cfg, RunDir& run) {
    // slerp properties on 1e3 random pairs
    Rng rng(41);
    bool slerp_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = rng.uniform_int(2, 16);
        Tensor<double> a({d}), b({d});
        rng.fill_normal(a);
        rng.fill_normal(b);
        const double r = rng.uniform(0.5, 2.0);
        const double na = norm2(a), nb = norm2(b);
        for (int i = 0; i < d; ++i) {
            a[i] *= r / na;
            b[i] *= r / nb;
        }
        const double tau = rng.uniform();
        auto s = slerp(a, b, tau);
        auto s0 = slerp(a, b, 0.0);
        auto flip = slerp(b, a, 1.0 - tau);
        slerp_ok = slerp_ok && std::abs(norm2(s) - r) < 1e-9 * std::max(1.0, r);
        for (int i = 0; i < d; ++i) {
            slerp_ok = slerp_ok && std::abs(s0[i] - a[i]) < 1e-9;
            slerp_ok = slerp_ok && std::abs(s[i] - flip[i]) < 1e-9;
        }
    }

    // 9-frame interpolation between opposite extremes on the trained model
    auto interp = stage_interp(cfg, run, 9);
    std::vector<double> zs;
    for (const auto& row : interp.at("frames")) zs.push_back(row.at("z_x").get<double>());
    auto spearman = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<double> rank(n);
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        for (size_t r = 0; r < n; ++r) rank[order[r]] = static_cast<double>(r);
        double d2 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double d = rank[i] - static_cast<double>(i);
            d2 += d * d;
        }
        const double nn = static_cast<double>(n);
        return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
    };
    bool frames_valid = true;
    for (double z : zs) frames_valid = frames_valid && z >= 0.0;
    const double rho = frames_valid && zs.size() == 9 ? spearman(zs) : -1.0;

    // attribute editing over 100 left-extreme sources
    auto edit = stage_edit(cfg, run, 100, cfg.lambda);
    const double moved = edit.at("moved_fraction").get<double>();

    const bool ok = slerp_ok && rho > 0.9 && moved >= 0.80;
    report(10, ok,
           fmt("latent ops: slerp properties on 1e3 pairs (%s), interpolation Spearman rho=%.3f "
               "(>0.9), editing moved the centroid toward the target on %.0f%% of 100 sources "
               "(>=80%%)",
               slerp_ok ? "ok" : "violated", rho, moved * 100.0));
}

void criterion_11(const std::string& work_root) {
    // checkpoint round-trip bit-equality
    ModelSpec spec;
    spec.modality = Modality::Vector;
    spec.input_shape = {3};
    spec.hidden = {8};
    spec.temb_dim = 8;
    spec.head = HeadKind::EpsV;
    spec.schedule_T = 16;
    MlpDenoiser<float> net(spec, 3);
    Checkpoint ck;
    ck.model_spec = spec;
    ck.schedule = {ScheduleFamily::Cosine, 16, 0.008};
    ck.raw = net.params();
    ck.ema = net.params();
    const std::string ck_path = work_root + "/roundtrip.dzsi";
    save_checkpoint(ck_path, ck);
    auto back = load_checkpoint(ck_path);
    bool bits_ok = true;
    for (size_t i = 0; i < ck.raw.entries.size(); ++i)
        bits_ok = bits_ok && back.raw.entries[i].w == ck.raw.entries[i].w;

    // two full pipeline runs at the reduced budget -> identical metric files
    auto reduced = [&](const std::string& dir) {
        ExperimentConfig cfg = acceptance_config(dir);
        cfg.ddpm.steps = 2000;
        cfg.classifier_train.steps = 1500;
        cfg.eval_train.steps = 1000;
        cfg.sample_n = 256;
        RunDir run(dir);
        run_circle_pipeline(cfg, run);
    };
    const std::string a = work_root + "/det_a", b = work_root + "/det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    reduced(a);
    reduced(b);
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    bool files_ok = true;
    for (const char* rel :
         {"reports/hist_unconditional.csv", "reports/hist_multi_guided.csv",
          "reports/accuracy_unconditional.json", "reports/accuracy_multi_guided.json",
          "samples/multi_guided/samples.dzds", "ckpt/denoiser.dzsi"}) {
        const std::string fa = slurp(fs::path(a) / rel), fb = slurp(fs::path(b) / rel);
        files_ok = files_ok && !fa.empty() && fa == fb;
    }
    report(11, bits_ok && files_ok,
           fmt("persistence & determinism: checkpoint round-trip bit-exact (%s); duplicate "
               "reduced-budget (2k-step) pipeline runs produced identical metric files (%s)",
               bits_ok ? "yes" : "no", files_ok ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
    const std::string work_root = argc > 1 ? argv[1] : "acceptance_work";
    // "quick" skips the training-bound criteria (development convenience;
    // ctest always runs the full suite)
    const bool quick = argc > 2 && std::string(argv[2]) == "quick";
    fs::remove_all(work_root);
    fs::create_directories(work_root);

    criterion_1();
    criterion_2();
    criterion_3();
    criterion_9();
    criterion_4();
    criterion_8();
    if (quick) {
        std::printf("acceptance (quick): criteria 5-7, 10-11 skipped\n");
        return g_failures == 0 ? 0 : 1;
    }

    // the shared desk-scale circle experiment
    const std::string big_dir = work_root + "/circle";
    ExperimentConfig cfg = acceptance_config(big_dir);
    {
        RunDir run(big_dir);
        std::printf("-- running the desk-scale circle pipeline (20k-step training)...\n");
        std::fflush(stdout);
        auto r = run_circle_pipeline(cfg, run);
        criterion_5(r);
        criterion_6(cfg, run);
        criterion_7(cfg, run);
        criterion_10(cfg, run);
    }
    criterion_11(work_root);

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) failed\n", g_failures);
    return 1;
}
