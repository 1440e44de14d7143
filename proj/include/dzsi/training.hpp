#pragma once

#include <functional>
#include <vector>

#include "dzsi/diffusion.hpp"
#include "dzsi/optim.hpp"
#include "dzsi/parallel.hpp"

namespace dzsi {

struct DdpmTrainOptions {
    int steps = 20000;
    int batch = 64;
    double lr = 1e-4;
    double ema_rate = 0.9999;
    double vlb_weight = 1e-3;  // hybrid objective weight; 0 trains on L_simple alone
    uint64_t seed = 0;
    int log_every = 500;
};

struct DdpmTrainStats {
    std::vector<std::pair<int, double>> loss_trace;  // (step, running mean loss)
    double final_loss = 0.0;
};

template <typename S>
inline void copy_param_values(ParamSet<S>& dst, const ParamSet<S>& src) {
    require(dst.entries.size() == src.entries.size(), "param layout mismatch");
    for (size_t i = 0; i < dst.entries.size(); ++i) {
        require(dst.entries[i].name == src.entries[i].name &&
                    dst.entries[i].w.size() == src.entries[i].w.size(),
                "param layout mismatch at " + dst.entries[i].name);
        dst.entries[i].w = src.entries[i].w;
    }
}

// eps-prediction training on the hybrid objective. The variational term's
// gradient reaches only the variance head (the mean is treated as constant);
// when the model has no v head the simple loss alone is used. `ema` receives
// the bias-corrected exponential moving average of the parameters (the
// accumulator starts at zero and is divided by 1 - rate^steps, so short
// desk-scale runs are not polluted by the random initialization).
template <typename Net>
inline DdpmTrainStats train_ddpm(Net& net, const std::vector<Tensor<float>>& data,
                                 const NoiseSchedule& sched, const DdpmTrainOptions& opt,
                                 ParamSet<float>& ema,
                                 const std::function<void(int, double)>& progress = nullptr) {
    require(!data.empty(), "training set is empty");
    require_config(opt.batch >= 1 && opt.steps >= 0, "bad training budget");
    const bool has_v = net.has_v_head();
    ema = net.params();
    for (auto& e : ema.entries) std::fill(e.w.begin(), e.w.end(), 0.0f);

    AdamState<float> adam(net.params(), opt.lr);
    std::vector<GradBuffer<float>> grads;
    for (int b = 0; b < opt.batch; ++b) grads.emplace_back(net.params());
    GradBuffer<float> total(net.params());
    std::vector<size_t> batch_ids(static_cast<size_t>(opt.batch));
    std::vector<uint64_t> batch_seeds(static_cast<size_t>(opt.batch));
    std::vector<double> batch_loss(static_cast<size_t>(opt.batch));
    Rng step_rng = Rng(opt.seed).fork(0xD0);

    DdpmTrainStats stats;
    double running = 0.0;
    int running_n = 0;
    for (int step = 0; step < opt.steps; ++step) {
        for (int b = 0; b < opt.batch; ++b) {
            batch_ids[static_cast<size_t>(b)] = static_cast<size_t>(step_rng.next_u64() % data.size());
            batch_seeds[static_cast<size_t>(b)] = step_rng.next_u64();
        }
        parallel_for(opt.batch, [&](int64_t lo, int64_t hi) {
            for (int64_t b = lo; b < hi; ++b) {
                auto& gb = grads[static_cast<size_t>(b)];
                gb.zero();
                const auto& x0 = data[batch_ids[static_cast<size_t>(b)]];
                Rng r(batch_seeds[static_cast<size_t>(b)]);
                const int t = r.uniform_int(1, sched.T());
                Tensor<float> eps(x0.shape);
                r.fill_normal(eps);
                Tensor<float> xt = q_sample(x0, t, eps, sched);
                Tape<float> tape;
                auto out = net.forward(xt, t, tape);
                Tensor<float> deps;
                double loss = simple_term(eps, out.eps, &deps);
                Tensor<float> dv;
                if (has_v && opt.vlb_weight > 0.0) {
                    loss += opt.vlb_weight *
                            vlb_term(x0, xt, t, out.eps, out.v, sched, &dv);
                    for (int64_t i = 0; i < dv.size(); ++i)
                        dv[i] = static_cast<float>(dv[i] * opt.vlb_weight);
                }
                net.backward(deps, dv.size() > 0 ? &dv : nullptr, tape, &gb);
                batch_loss[static_cast<size_t>(b)] = loss;
            }
        });
        total.zero();
        for (const auto& g : grads) total.add(g);
        total.scale(1.0f / static_cast<float>(opt.batch));
        adam_step(adam, net.params(), total);
        ema_update(ema, net.params(), opt.ema_rate);

        double step_loss = 0.0;
        for (double l : batch_loss) step_loss += l;
        step_loss /= opt.batch;
        running += step_loss;
        running_n += 1;
        if ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps) {
            stats.loss_trace.push_back({step + 1, running / running_n});
            if (progress) progress(step + 1, running / running_n);
            stats.final_loss = running / running_n;
            running = 0.0;
            running_n = 0;
        }
    }
    if (opt.steps == 0) {
        ema = net.params();
    } else {
        const double correction = 1.0 - std::pow(opt.ema_rate, static_cast<double>(opt.steps));
        if (correction > 0.0)
            for (auto& e : ema.entries)
                for (auto& w : e.w) w = static_cast<float>(static_cast<double>(w) / correction);
        else
            ema = net.params();  // rate == 1 degenerates to the raw params
    }
    return stats;
}

// Conv denoiser training needs the forward signature without the context
// argument; adapt the vector denoiser to the same shape.
template <typename S>
struct MlpDenoiserTrainAdapter {
    MlpDenoiser<S>& net;

    auto forward(const Tensor<S>& x, int t, Tape<S>& tape) const {
        return net.forward(x, t, MlpDenoiser<S>::kNullContext, tape);
    }
    Tensor<S> backward(const Tensor<S>& deps, const Tensor<S>* dv, Tape<S>& tape,
                       GradBuffer<S>* gb) const {
        return net.backward(deps, dv, tape, gb);
    }
    ParamSet<S>& params() { return net.params(); }
    const ParamSet<S>& params() const { return net.params(); }
    bool has_v_head() const { return net.has_v_head(); }
};

}  // namespace dzsi
