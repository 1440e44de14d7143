#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "dzsi/datasets.hpp"
#include "dzsi/diffusion.hpp"
#include "dzsi/eval.hpp"
#include "dzsi/optim.hpp"
#include "dzsi/parallel.hpp"

namespace dzsi {

struct TrainOptions {
    int steps = 3000;
    int batch = 64;
    double lr = 3e-4;
    uint64_t seed = 0;
    bool spectral_norm = false;
    double val_fraction = 0.1;
};

namespace detail {

// Deterministic train/val split by seeded shuffle.
inline void split_indices(size_t n, double val_fraction, uint64_t seed,
                          std::vector<size_t>& train, std::vector<size_t>& val) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_u64() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    size_t nval = static_cast<size_t>(static_cast<double>(n) * val_fraction);
    val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
    train.assign(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
}

}  // namespace detail

// t-conditioned guidance classifier trained with cross-entropy on
// q_sample-corrupted inputs at uniformly drawn t.
struct NoisyClassifier {
    std::shared_ptr<ClassifierNet<float>> net;
    double train_accuracy = 0.0;  // clean inputs, t = 0
    double val_accuracy = 0.0;
};

// Clean-input evaluation model: classifier logits with a calibration
// temperature, or a scalar regressor whose output is clamped to [0, 1].
struct EvalModel {
    std::shared_ptr<ClassifierNet<float>> net;
    double temperature = 1.0;
    double train_metric = 0.0;  // accuracy (classify) or RMSE (regress)
    double val_metric = 0.0;

    bool is_regression() const { return net->spec().head == HeadKind::Scalar; }

    std::vector<double> probabilities(const Tensor<float>& x) const {
        require(!is_regression(), "probabilities need a logits head");
        Tape<float> tape;
        auto logits = net->forward(x, 0, tape);
        Tensor<float> scaled(logits.shape);
        for (int64_t i = 0; i < logits.size(); ++i)
            scaled[i] = static_cast<float>(logits[i] / temperature);
        auto p = softmax(scaled);
        std::vector<double> out(static_cast<size_t>(p.size()));
        for (int64_t i = 0; i < p.size(); ++i) out[static_cast<size_t>(i)] = p[i];
        return out;
    }

    // Calibrated probability of the positive category, or clamped z_hat.
    double positive_prob(const Tensor<float>& x, int category = 1) const {
        if (is_regression()) {
            Tape<float> tape;
            auto out = net->forward(x, 0, tape);
            return std::clamp(static_cast<double>(out[0]), 0.0, 1.0);
        }
        return probabilities(x)[static_cast<size_t>(category)];
    }
};

namespace detail {

struct BatchWork {
    std::vector<GradBuffer<float>> grads;
    std::vector<double> losses;
};

// Shared classifier training loop. When `sched` is non-null, inputs are
// corrupted by q_sample at per-example uniform t (guidance classifier);
// otherwise inputs stay clean with t = 0.
inline std::shared_ptr<ClassifierNet<float>> train_classifier_net(
    const LabeledSet& set, const ModelSpec& spec, const TrainOptions& opt,
    const NoiseSchedule* sched, const std::vector<size_t>& train_idx) {
    require_config(!train_idx.empty(), "empty training split");
    auto net = std::make_shared<ClassifierNet<float>>(spec, Rng(opt.seed).fork(1).state());
    AdamState<float> adam(net->params(), opt.lr);
    SpectralSet<float> spectral;
    if (opt.spectral_norm) {
        spectral = SpectralSet<float>(net->spectral_weight_ids());
        spectral.project(net->params());
    }
    const bool regress = spec.head == HeadKind::Scalar;
    Rng step_rng = Rng(opt.seed).fork(2);
    std::vector<GradBuffer<float>> grads;
    for (int b = 0; b < opt.batch; ++b) grads.emplace_back(net->params());
    GradBuffer<float> total(net->params());
    std::vector<size_t> batch_ids(static_cast<size_t>(opt.batch));
    std::vector<uint64_t> batch_seeds(static_cast<size_t>(opt.batch));
    for (int step = 0; step < opt.steps; ++step) {
        for (int b = 0; b < opt.batch; ++b) {
            batch_ids[static_cast<size_t>(b)] =
                train_idx[static_cast<size_t>(step_rng.next_u64() % train_idx.size())];
            batch_seeds[static_cast<size_t>(b)] = step_rng.next_u64();
        }
        parallel_for(opt.batch, [&](int64_t lo, int64_t hi) {
            for (int64_t b = lo; b < hi; ++b) {
                auto& gb = grads[static_cast<size_t>(b)];
                gb.zero();
                const size_t i = batch_ids[static_cast<size_t>(b)];
                Rng r(batch_seeds[static_cast<size_t>(b)]);
                Tensor<float> x = set.x[i];
                int t = 0;
                if (sched) {
                    t = r.uniform_int(1, sched->T());
                    Tensor<float> eps(x.shape);
                    r.fill_normal(eps);
                    x = q_sample(x, t, eps, *sched);
                }
                Tape<float> tape;
                auto out = net->forward(x, t, tape);
                Tensor<float> dout;
                if (regress) {
                    const float target = set.z[i][0];
                    dout = Tensor<float>({1});
                    dout[0] = 2.0f * (out[0] - target);
                } else {
                    cross_entropy(out, set.label(i), &dout);
                }
                net->backward(dout, tape, &gb);
            }
        });
        total.zero();
        for (const auto& g : grads) total.add(g);
        total.scale(1.0f / static_cast<float>(opt.batch));
        adam_step(adam, net->params(), total);
        if (opt.spectral_norm) spectral.project(net->params());
    }
    return net;
}

inline double clean_accuracy(const ClassifierNet<float>& net, const LabeledSet& set,
                             const std::vector<size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::vector<int> ok(idx.size(), 0);
    parallel_for(static_cast<int64_t>(idx.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t k = lo; k < hi; ++k) {
            Tape<float> tape;
            auto logits = net.forward(set.x[idx[static_cast<size_t>(k)]], 0, tape);
            int arg = 0;
            for (int64_t c = 1; c < logits.size(); ++c)
                if (logits[c] > logits[arg]) arg = static_cast<int>(c);
            ok[static_cast<size_t>(k)] = arg == set.label(idx[static_cast<size_t>(k)]) ? 1 : 0;
        }
    });
    int64_t hits = 0;
    for (int v : ok) hits += v;
    return static_cast<double>(hits) / static_cast<double>(idx.size());
}

inline double clean_rmse(const ClassifierNet<float>& net, const LabeledSet& set,
                         const std::vector<size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::vector<double> se(idx.size(), 0.0);
    parallel_for(static_cast<int64_t>(idx.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t k = lo; k < hi; ++k) {
            Tape<float> tape;
            auto out = net.forward(set.x[idx[static_cast<size_t>(k)]], 0, tape);
            const double d = std::clamp(static_cast<double>(out[0]), 0.0, 1.0) -
                             static_cast<double>(set.z[idx[static_cast<size_t>(k)]][0]);
            se[static_cast<size_t>(k)] = d * d;
        }
    });
    double acc = 0.0;
    for (double v : se) acc += v;
    return std::sqrt(acc / static_cast<double>(idx.size()));
}

}  // namespace detail

inline NoisyClassifier train_noisy_classifier(const LabeledSet& set, const NoiseSchedule& sched,
                                              ModelSpec spec, const TrainOptions& opt) {
    require(set.factors() >= 1, "labeled set required");
    spec.head = HeadKind::Logits;
    spec.categories = set.label_count();
    spec.spectral_norm = opt.spectral_norm;
    spec.schedule_T = sched.T();
    require_config(spec.temb_dim > 0, "guidance classifier must be t-conditioned");
    std::vector<size_t> train, val;
    detail::split_indices(set.size(), opt.val_fraction, Rng(opt.seed).fork(0).state(), train, val);
    auto net = detail::train_classifier_net(set, spec, opt, &sched, train);
    if (!net->params().all_finite())
        throw numeric_error("noisy classifier training diverged");
    NoisyClassifier out;
    out.net = net;
    out.train_accuracy = detail::clean_accuracy(*net, set, train);
    out.val_accuracy = detail::clean_accuracy(*net, set, val);
    return out;
}

enum class EvalMode { Classify, Regress };

inline EvalModel train_eval_model(const LabeledSet& set, ModelSpec spec, const TrainOptions& opt,
                                  EvalMode mode = EvalMode::Classify) {
    spec.temb_dim = 0;  // clean-input model
    spec.head = mode == EvalMode::Classify ? HeadKind::Logits : HeadKind::Scalar;
    if (mode == EvalMode::Classify) spec.categories = set.label_count();
    spec.spectral_norm = opt.spectral_norm;
    std::vector<size_t> train, val;
    detail::split_indices(set.size(), opt.val_fraction, Rng(opt.seed).fork(0).state(), train, val);
    auto net = detail::train_classifier_net(set, spec, opt, nullptr, train);
    if (!net->params().all_finite()) throw numeric_error("evaluation model training diverged");
    EvalModel out;
    out.net = net;
    if (mode == EvalMode::Classify) {
        out.train_metric = detail::clean_accuracy(*net, set, train);
        out.val_metric = detail::clean_accuracy(*net, set, val);
    } else {
        out.train_metric = detail::clean_rmse(*net, set, train);
        out.val_metric = detail::clean_rmse(*net, set, val);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Temperature scaling
// ---------------------------------------------------------------------------

namespace detail {

inline double nll_at_temperature(const std::vector<Tensor<float>>& logits,
                                 const std::vector<int>& labels, double T) {
    double acc = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        Tensor<float> scaled(logits[i].shape);
        for (int64_t j = 0; j < scaled.size(); ++j)
            scaled[j] = static_cast<float>(logits[i][j] / T);
        auto p = softmax(scaled);
        acc -= std::log(std::max(static_cast<double>(p[labels[i]]), 1e-30));
    }
    return acc / static_cast<double>(logits.size());
}

// Expected calibration error, 15 equal-width confidence bins.
inline double ece(const std::vector<Tensor<float>>& logits, const std::vector<int>& labels,
                  double T, int bins = 15) {
    std::vector<double> conf_sum(static_cast<size_t>(bins), 0.0);
    std::vector<double> acc_sum(static_cast<size_t>(bins), 0.0);
    std::vector<int64_t> count(static_cast<size_t>(bins), 0);
    for (size_t i = 0; i < logits.size(); ++i) {
        Tensor<float> scaled(logits[i].shape);
        for (int64_t j = 0; j < scaled.size(); ++j)
            scaled[j] = static_cast<float>(logits[i][j] / T);
        auto p = softmax(scaled);
        int arg = 0;
        for (int64_t c = 1; c < p.size(); ++c)
            if (p[c] > p[arg]) arg = static_cast<int>(c);
        const double conf = p[arg];
        int b = std::clamp(static_cast<int>(std::floor(conf * bins)), 0, bins - 1);
        conf_sum[static_cast<size_t>(b)] += conf;
        acc_sum[static_cast<size_t>(b)] += arg == labels[i] ? 1.0 : 0.0;
        count[static_cast<size_t>(b)] += 1;
    }
    double e = 0.0;
    const auto n = static_cast<double>(logits.size());
    for (int b = 0; b < bins; ++b) {
        if (count[static_cast<size_t>(b)] == 0) continue;
        const auto m = static_cast<double>(count[static_cast<size_t>(b)]);
        e += m / n * std::abs(acc_sum[static_cast<size_t>(b)] / m -
                              conf_sum[static_cast<size_t>(b)] / m);
    }
    return e;
}

}  // namespace detail

// 1-D golden-section search of the validation NLL over T in [0.25, 4].
// Falls back to T = 1 when the set is degenerate or when the searched
// temperature would increase the 15-bin expected calibration error.
inline double calibrate_temperature_core(const std::vector<Tensor<float>>& logits,
                                         const std::vector<int>& labels) {
    require(logits.size() == labels.size(), "logit/label count mismatch");
    if (logits.size() < 10) return 1.0;
    bool degenerate = true;
    for (int l : labels)
        if (l != labels[0]) degenerate = false;
    if (degenerate) return 1.0;

    double lo = 0.25, hi = 4.0;
    const double gr = 0.61803398874989484820;
    double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
    double fa = detail::nll_at_temperature(logits, labels, a);
    double fb = detail::nll_at_temperature(logits, labels, b);
    for (int it = 0; it < 60; ++it) {
        if (fa < fb) {
            hi = b;
            b = a;
            fb = fa;
            a = hi - gr * (hi - lo);
            fa = detail::nll_at_temperature(logits, labels, a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + gr * (hi - lo);
            fb = detail::nll_at_temperature(logits, labels, b);
        }
    }
    double T = 0.5 * (lo + hi);
    if (detail::ece(logits, labels, T) > detail::ece(logits, labels, 1.0)) T = 1.0;
    return T;
}

inline double calibrate_temperature(EvalModel& model, const LabeledSet& val) {
    require(!model.is_regression(), "calibration applies to classification mode");
    std::vector<Tensor<float>> logits;
    std::vector<int> labels;
    logits.reserve(val.size());
    for (size_t i = 0; i < val.size(); ++i) {
        Tape<float> tape;
        logits.push_back(model.net->forward(val.x[i], 0, tape));
        labels.push_back(val.label(i));
    }
    model.temperature = calibrate_temperature_core(logits, labels);
    return model.temperature;
}

// ---------------------------------------------------------------------------
// Two-stage ensemble extreme-filter
// ---------------------------------------------------------------------------

struct FilterConfig {
    double tau1 = 0.0;  // <= 0: choose on the held-out set
    double tau2 = 0.0;
    int ensemble_size = 5;
    int keep_per_side = 1000;
    ModelSpec member_spec;  // head/categories filled from the set
    TrainOptions stage1_train;
    TrainOptions member_train;

    void validate() const {
        require_config(tau1 <= 0.0 || (tau1 > 0.5 && tau1 < 1.0), "tau1 must lie in (0.5, 1)");
        require_config(tau2 <= 0.0 || (tau2 > 0.5 && tau2 < 1.0), "tau2 must lie in (0.5, 1)");
        require_config(ensemble_size >= 2, "ensemble needs at least 2 members");
        require_config(keep_per_side >= 1, "keep at least one sample per side");
    }
};

struct FilterReport {
    size_t input_size = 0;
    size_t stage1_size = 0;    // |S'|
    size_t ensemble_size = 0;  // |S''|
    size_t final_size = 0;     // |S*|
    std::vector<size_t> per_side;
    size_t disagreement_count = 0;  // dropped by the ensemble stage
    double tau1 = 0.0, tau2 = 0.0;
    bool keep_truncated = true;  // false when fewer than k per side remained
    std::vector<double> leakage_bounds;  // Chernoff P(X >= a) for a = 10, 15, 20
};

// Multiplicative Chernoff upper bound on P(X >= a), X ~ Binomial(n, p):
// exp(-np) (e np / a)^a, valid for a > np.
inline double chernoff_bound(double n, double p, double a) {
    require(n > 0 && p > 0 && p < 1, "chernoff: need n > 0 and p in (0, 1)");
    const double np = n * p;
    if (a <= np) throw contract_error("chernoff bound needs a > n*p");
    const double log_bound = -np + a * (1.0 + std::log(np) - std::log(a));
    return std::exp(log_bound);
}

// Class-probability provider used by the threshold search and the filter.
using ProbFn = std::function<std::vector<double>(const Tensor<float>&)>;

inline ProbFn raw_prob_fn(std::shared_ptr<ClassifierNet<float>> net) {
    return [net](const Tensor<float>& x) {
        Tape<float> tape;
        auto logits = net->forward(x, 0, tape);
        auto p = softmax(logits);
        std::vector<double> out(static_cast<size_t>(p.size()));
        for (int64_t i = 0; i < p.size(); ++i) out[static_cast<size_t>(i)] = p[i];
        return out;
    };
}

// Smallest threshold on the fixed grid at which every model's confident
// assertion is correct on the held-out set (precision exactly 1).
inline double choose_threshold(const std::vector<ProbFn>& models, const LabeledSet& heldout) {
    require(!models.empty() && heldout.size() > 0, "threshold choice needs models and data");
    static constexpr double kGrid[] = {0.9, 0.95, 0.99, 0.995, 0.999};
    // cache per-model class probabilities
    std::vector<std::vector<std::vector<double>>> probs(
        models.size(), std::vector<std::vector<double>>(heldout.size()));
    for (size_t m = 0; m < models.size(); ++m) {
        parallel_for(static_cast<int64_t>(heldout.size()), [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                probs[m][static_cast<size_t>(i)] = models[m](heldout.x[static_cast<size_t>(i)]);
        });
    }
    const int ncls = static_cast<int>(probs[0][0].size());
    for (double tau : kGrid) {
        int64_t asserted = 0, correct = 0;
        for (size_t i = 0; i < heldout.size(); ++i) {
            for (int c = 0; c < ncls; ++c) {
                bool all = true;
                for (size_t m = 0; m < models.size(); ++m)
                    if (probs[m][i][static_cast<size_t>(c)] <= tau) {
                        all = false;
                        break;
                    }
                if (all) {
                    asserted += 1;
                    if (c == heldout.label(i)) correct += 1;
                    break;  // tau > 0.5: at most one class can clear it
                }
            }
        }
        if (asserted > 0 && correct == asserted) return tau;
    }
    throw numeric_error("no grid threshold reaches precision 1 on the held-out set");
}

struct FilterOutput {
    LabeledSet kept;
    std::vector<size_t> kept_indices;
    FilterReport report;
    std::shared_ptr<ClassifierNet<float>> stage1;
    std::vector<std::shared_ptr<ClassifierNet<float>>> members;
};

// Two-stage filter: stage 1 keeps samples where a classifier trained on the
// full set is confident and agrees with the label; stage 2 trains an
// ensemble on disjoint random subsets of the survivors and keeps samples
// every member confidently agrees on; finally only the k most extreme
// samples per side (ranked by the stage-1 model's probability, or by the
// supplied evaluation model) remain.
inline FilterOutput ensemble_filter(const LabeledSet& set, const FilterConfig& cfg_in,
                                    const LabeledSet& heldout, uint64_t seed,
                                    const EvalModel* ranker = nullptr) {
    FilterConfig cfg = cfg_in;
    cfg.validate();
    require(set.factors() == 1, "filter operates on single-factor sets");
    Rng root(seed);

    // Stage-1 model on the full input set.
    ModelSpec spec = cfg.member_spec;
    spec.modality = set.modality;
    spec.input_shape = set.shape;
    if (spec.hidden.empty()) spec.hidden = {set.modality == Modality::Image ? 8 : 32};
    spec.temb_dim = 0;
    spec.head = HeadKind::Logits;
    spec.categories = set.label_count();
    TrainOptions s1 = cfg.stage1_train;
    s1.seed = root.fork(1).state();
    std::vector<size_t> all(set.size());
    std::iota(all.begin(), all.end(), size_t{0});
    auto stage1 = detail::train_classifier_net(set, spec, s1, nullptr, all);

    FilterReport report;
    report.input_size = set.size();
    report.tau1 = cfg.tau1 > 0.0 ? cfg.tau1 : choose_threshold({raw_prob_fn(stage1)}, heldout);

    auto prob_of_label = [&](const ClassifierNet<float>& net, size_t i) {
        Tape<float> tape;
        auto logits = net.forward(set.x[i], 0, tape);
        auto p = softmax(logits);
        return static_cast<double>(p[set.label(i)]);
    };

    // S': confident agreement with the label.
    std::vector<size_t> s_prime;
    {
        std::vector<double> p(set.size());
        parallel_for(static_cast<int64_t>(set.size()), [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                p[static_cast<size_t>(i)] = prob_of_label(*stage1, static_cast<size_t>(i));
        });
        for (size_t i = 0; i < set.size(); ++i)
            if (p[i] > report.tau1) s_prime.push_back(i);
    }
    report.stage1_size = s_prime.size();
    require_config(s_prime.size() >= static_cast<size_t>(cfg.ensemble_size) * 2,
                   "stage-1 survivors too few for a disjoint ensemble split");

    // Disjoint equal random split of S'.
    std::vector<size_t> shuffled = s_prime;
    {
        Rng r = root.fork(2);
        for (size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[static_cast<size_t>(r.next_u64() % i)]);
    }
    std::vector<std::shared_ptr<ClassifierNet<float>>> members;
    const size_t chunk = shuffled.size() / static_cast<size_t>(cfg.ensemble_size);
    for (int m = 0; m < cfg.ensemble_size; ++m) {
        std::vector<size_t> sub(shuffled.begin() + static_cast<std::ptrdiff_t>(m * chunk),
                                shuffled.begin() + static_cast<std::ptrdiff_t>(
                                                       m + 1 == cfg.ensemble_size
                                                           ? shuffled.size()
                                                           : (m + 1) * chunk));
        TrainOptions mo = cfg.member_train;
        mo.seed = root.fork(10 + static_cast<uint64_t>(m)).state();
        members.push_back(detail::train_classifier_net(set, spec, mo, nullptr, sub));
    }

    std::vector<ProbFn> member_fns;
    for (const auto& m : members) member_fns.push_back(raw_prob_fn(m));
    report.tau2 = cfg.tau2 > 0.0 ? cfg.tau2 : choose_threshold(member_fns, heldout);

    // S'': every member confident about the labeled class.
    std::vector<size_t> s_double;
    {
        std::vector<int> keep(s_prime.size(), 0);
        parallel_for(static_cast<int64_t>(s_prime.size()), [&](int64_t lo, int64_t hi) {
            for (int64_t k = lo; k < hi; ++k) {
                const size_t i = s_prime[static_cast<size_t>(k)];
                bool all = true;
                for (const auto& m : members)
                    if (prob_of_label(*m, i) <= report.tau2) {
                        all = false;
                        break;
                    }
                keep[static_cast<size_t>(k)] = all ? 1 : 0;
            }
        });
        for (size_t k = 0; k < s_prime.size(); ++k)
            if (keep[k]) s_double.push_back(s_prime[k]);
    }
    report.ensemble_size = s_double.size();
    report.disagreement_count = s_prime.size() - s_double.size();

    // Rank each side by the extreme-ness proxy and keep the top k.
    auto extremeness = [&](size_t i) {
        if (ranker) return ranker->positive_prob(set.x[i], set.label(i));
        Tape<float> tape;
        auto logits = stage1->forward(set.x[i], 0, tape);
        auto p = softmax(logits);
        return static_cast<double>(p[set.label(i)]);
    };
    std::vector<std::vector<std::pair<double, size_t>>> sides(2);
    for (size_t i : s_double)
        sides[static_cast<size_t>(set.label(i))].push_back({extremeness(i), i});
    std::vector<size_t> final_idx;
    report.per_side.assign(2, 0);
    report.keep_truncated = true;
    for (int side = 0; side < 2; ++side) {
        auto& v = sides[static_cast<size_t>(side)];
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        });
        if (v.size() < static_cast<size_t>(cfg.keep_per_side)) report.keep_truncated = false;
        const size_t take = std::min(v.size(), static_cast<size_t>(cfg.keep_per_side));
        report.per_side[static_cast<size_t>(side)] = take;
        for (size_t k = 0; k < take; ++k) final_idx.push_back(v[k].second);
    }
    std::sort(final_idx.begin(), final_idx.end());
    report.final_size = final_idx.size();

    // Worst-case leakage bounds in the style of the appendix estimate.
    const double p_err = std::pow(0.15, cfg.ensemble_size);
    for (double a : {10.0, 15.0, 20.0}) {
        const double np = static_cast<double>(report.final_size) * p_err;
        report.leakage_bounds.push_back(a > np ? chernoff_bound(
                                                     static_cast<double>(report.final_size),
                                                     p_err, a)
                                               : 1.0);
    }

    FilterOutput out;
    out.kept = set.subset(final_idx);
    out.kept_indices = std::move(final_idx);
    out.report = std::move(report);
    out.stage1 = std::move(stage1);
    out.members = std::move(members);
    return out;
}

}  // namespace dzsi
