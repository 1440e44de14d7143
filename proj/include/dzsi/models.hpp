#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dzsi/nn.hpp"

namespace dzsi {

enum class Modality { Vector, Image };
enum class HeadKind { Eps, EpsV, Logits, Scalar };

inline const char* to_string(Modality m) { return m == Modality::Vector ? "vector" : "image"; }
inline const char* to_string(HeadKind h) {
    switch (h) {
        case HeadKind::Eps: return "eps";
        case HeadKind::EpsV: return "eps_v";
        case HeadKind::Logits: return "logits";
        default: return "scalar";
    }
}

struct ModelSpec {
    Modality modality = Modality::Image;
    std::vector<int> input_shape;  // {D} for vectors, {H, W, C} for images
    std::vector<int> hidden;       // vector: {width}; image: {base_channels}
    int res_stages = 1;
    int temb_dim = 128;  // 0 disables t-conditioning
    HeadKind head = HeadKind::Eps;
    int categories = 2;
    bool spectral_norm = false;
    int class_contexts = 0;  // >0: conditional vector denoiser (+1 null token)
    int schedule_T = 250;    // embedding normalization horizon

    void validate() const {
        if (modality == Modality::Vector) {
            require_config(input_shape.size() == 1 && input_shape[0] >= 1, "vector input shape");
        } else {
            require_config(input_shape.size() == 3, "image input shape must be {H, W, C}");
            require_config(input_shape[2] == 1, "only single-channel images are supported");
            require_config(input_shape[0] >= 8 && input_shape[0] % 2 == 0 &&
                               input_shape[1] == input_shape[0],
                           "image side must be even and >= 8");
        }
        require_config(!hidden.empty() && hidden[0] > 0, "hidden widths must be positive");
        require_config(res_stages >= 1, "need at least one residual stage");
        if (head == HeadKind::Eps || head == HeadKind::EpsV)
            require_config(temb_dim > 0, "denoisers must be t-conditioned");
        if (head == HeadKind::Logits) require_config(categories >= 2, "need >= 2 categories");
        require_config(temb_dim % 2 == 0, "time-embedding dimension must be even");
    }
};

// Sampling-time denoiser interface: anything producing eps_hat(x_t, t).
// Implementations must be const-thread-safe (chains run in parallel).
template <typename S>
struct Denoiser {
    virtual ~Denoiser() = default;
    virtual void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const = 0;
    virtual bool has_v_head() const = 0;
};

// One guidance term provider: gradient of log p(category | x, t) w.r.t. x.
template <typename S>
struct GuidanceGrad {
    virtual ~GuidanceGrad() = default;
    virtual Tensor<S> grad_logp(const Tensor<S>& x, int t, int category) const = 0;
    virtual int categories() const = 0;
};

namespace detail {

template <typename S>
struct ResBlock {
    Conv3x3<S> conv1, conv2;
    Dense<S> tproj;
    Silu<S> act;
    bool has_t = false;

    void init(ParamSet<S>& ps, const std::string& name, int c, int temb_dim, Rng& rng) {
        conv1.init(ps, name + ".conv1", c, c, 1, rng);
        // zero-initialized branch output: blocks start as the identity
        conv2.init(ps, name + ".conv2", c, c, 1, rng, /*zero_init=*/true);
        has_t = temb_dim > 0;
        if (has_t) tproj.init(ps, name + ".tproj", temb_dim, c, rng);
    }

    Tensor<S> forward(const ParamSet<S>& ps, const Tensor<S>& x, const Tensor<S>* temb,
                      Tape<S>& tape) const {
        Tensor<S> h = conv1.forward(ps, x, tape);
        if (has_t && temb) {
            Tensor<S> bias = tproj.forward(ps, *temb, tape);
            add_channel_bias(h, bias);
        }
        h = act.forward(h, tape);
        h = conv2.forward(ps, h, tape);
        axpy(S(1), x, h);
        return h;
    }

    // Returns dx; adds the time-embedding contribution into dtemb.
    Tensor<S> backward(const ParamSet<S>& ps, const Tensor<S>& dy, Tape<S>& tape,
                       GradBuffer<S>* gb, Tensor<S>* dtemb) const {
        Tensor<S> d = conv2.backward(ps, dy, tape, gb);
        d = act.backward(d, tape);
        if (has_t) {
            Tensor<S> dbias = reduce_channel_bias_grad(d);
            Tensor<S> dt = tproj.backward(ps, dbias, tape, gb);
            if (dtemb) axpy(S(1), dt, *dtemb);
        }
        Tensor<S> dx = conv1.backward(ps, d, tape, gb);
        axpy(S(1), dy, dx);  // identity branch
        return dx;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Image denoiser: 2-scale convolutional encoder/decoder with residual blocks
// and an additively injected sinusoidal time embedding. Output heads: eps, or
// eps plus a per-element variance-interpolation channel v.
// ---------------------------------------------------------------------------
template <typename S>
class ConvDenoiser : public Denoiser<S> {
  public:
    ConvDenoiser(ModelSpec spec, uint64_t init_seed) : spec_(std::move(spec)) {
        spec_.validate();
        require_config(spec_.modality == Modality::Image, "ConvDenoiser needs image modality");
        require_config(spec_.head == HeadKind::Eps || spec_.head == HeadKind::EpsV,
                       "ConvDenoiser head must be eps or eps_v");
        Rng rng(init_seed);
        const int c = spec_.hidden[0];
        temb_.init(params_, "temb", spec_.temb_dim, spec_.schedule_T, rng);
        conv_in_.init(params_, "conv_in", spec_.input_shape[2], c, 1, rng);
        enc_.init(params_, "enc", c, spec_.temb_dim, rng);
        down_.init(params_, "down", c, 2 * c, 2, rng);
        mid_.resize(static_cast<size_t>(spec_.res_stages));
        for (int i = 0; i < spec_.res_stages; ++i)
            mid_[static_cast<size_t>(i)].init(params_, "mid" + std::to_string(i), 2 * c,
                                              spec_.temb_dim, rng);
        up_.init(params_, "up", 2 * c, c, 1, rng);
        dec_.init(params_, "dec", c, spec_.temb_dim, rng);
        const int out_c = spec_.head == HeadKind::EpsV ? 2 : 1;
        conv_out_.init(params_, "conv_out", c, out_c, 1, rng, /*zero_init=*/true);
    }

    struct Fwd {
        Tensor<S> eps;
        Tensor<S> v;  // empty when the head is eps-only
    };

    Fwd forward(const Tensor<S>& x, int t, Tape<S>& tape) const {
        require(x.shape == spec_.input_shape, "denoiser input shape mismatch");
        Tensor<S> temb = temb_.forward(params_, t, tape);
        Tensor<S> h = conv_in_.forward(params_, x, tape);
        Tensor<S> e1 = enc_.forward(params_, h, &temb, tape);
        Tensor<S> m = down_.forward(params_, e1, tape);
        for (const auto& blk : mid_) m = blk.forward(params_, m, &temb, tape);
        Tensor<S> u = up_.forward(params_, up2_.forward(m), tape);
        axpy(S(1), e1, u);  // encoder skip
        Tensor<S> d = dec_.forward(params_, u, &temb, tape);
        Tensor<S> out = conv_out_.forward(params_, d, tape);
        return split_heads(out);
    }

    // deps/dv pair up with forward's outputs; returns d(loss)/dx.
    Tensor<S> backward(const Tensor<S>& deps, const Tensor<S>* dv, Tape<S>& tape,
                       GradBuffer<S>* gb) const {
        Tensor<S> dout = merge_heads(deps, dv);
        Tensor<S> dtemb({spec_.temb_dim});
        Tensor<S> dd = conv_out_.backward(params_, dout, tape, gb);
        Tensor<S> du = dec_.backward(params_, dd, tape, gb, &dtemb);
        Tensor<S> dskip = du;  // skip branch of the add
        Tensor<S> dm = up2_.backward(up_.backward(params_, du, tape, gb));
        for (auto it = mid_.rbegin(); it != mid_.rend(); ++it)
            dm = it->backward(params_, dm, tape, gb, &dtemb);
        Tensor<S> de1 = down_.backward(params_, dm, tape, gb);
        axpy(S(1), dskip, de1);
        Tensor<S> dh = enc_.backward(params_, de1, tape, gb, &dtemb);
        Tensor<S> dx = conv_in_.backward(params_, dh, tape, gb);
        temb_.backward(params_, dtemb, tape, gb);
        return dx;
    }

    void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const override {
        Tape<S> tape;
        Fwd out = forward(x, t, tape);
        eps = std::move(out.eps);
        if (v && spec_.head == HeadKind::EpsV) *v = std::move(out.v);
    }

    bool has_v_head() const override { return spec_.head == HeadKind::EpsV; }

    ParamSet<S>& params() { return params_; }
    const ParamSet<S>& params() const { return params_; }
    const ModelSpec& spec() const { return spec_; }

  private:
    Fwd split_heads(const Tensor<S>& out) const {
        const int H = out.shape[0], W = out.shape[1], C = out.shape[2];
        Fwd r;
        r.eps = Tensor<S>({H, W, 1});
        if (C == 2) r.v = Tensor<S>({H, W, 1});
        for (int p = 0; p < H * W; ++p) {
            r.eps[p] = out[static_cast<int64_t>(p) * C];
            if (C == 2) r.v[p] = out[static_cast<int64_t>(p) * C + 1];
        }
        return r;
    }

    Tensor<S> merge_heads(const Tensor<S>& deps, const Tensor<S>* dv) const {
        const int H = deps.shape[0], W = deps.shape[1];
        const int C = spec_.head == HeadKind::EpsV ? 2 : 1;
        Tensor<S> dout({H, W, C});
        for (int p = 0; p < H * W; ++p) {
            dout[static_cast<int64_t>(p) * C] = deps[p];
            if (C == 2) dout[static_cast<int64_t>(p) * C + 1] = dv ? (*dv)[p] : S(0);
        }
        return dout;
    }

    ModelSpec spec_;
    ParamSet<S> params_;
    TimeEmbed<S> temb_;
    Conv3x3<S> conv_in_, down_, up_, conv_out_;
    detail::ResBlock<S> enc_, dec_;
    std::vector<detail::ResBlock<S>> mid_;
    UpsampleNearest2x<S> up2_;
};

// ---------------------------------------------------------------------------
// Vector denoiser: MLP with additive time embedding and optional class
// conditioning (a learned embedding per context plus a null token).
// ---------------------------------------------------------------------------
template <typename S>
class MlpDenoiser : public Denoiser<S> {
  public:
    static constexpr int kNullContext = -1;

    MlpDenoiser(ModelSpec spec, uint64_t init_seed) : spec_(std::move(spec)) {
        spec_.validate();
        require_config(spec_.modality == Modality::Vector, "MlpDenoiser needs vector modality");
        Rng rng(init_seed);
        const int d = spec_.input_shape[0];
        const int h = spec_.hidden[0];
        temb_.init(params_, "temb", spec_.temb_dim, spec_.schedule_T, rng);
        if (spec_.class_contexts > 0) {
            ctx_table_ = params_.add("ctx_table", {spec_.class_contexts + 1, spec_.temb_dim});
            init::kaiming(params_.at(ctx_table_).w, spec_.temb_dim, rng);
        }
        in_.init(params_, "in", d, h, rng);
        tproj_in_.init(params_, "tproj_in", spec_.temb_dim, h, rng);
        stages_.resize(static_cast<size_t>(spec_.res_stages));
        for (int i = 0; i < spec_.res_stages; ++i) {
            auto& st = stages_[static_cast<size_t>(i)];
            std::string nm = "stage" + std::to_string(i);
            st.l1.init(params_, nm + ".l1", h, h, rng);
            st.tp.init(params_, nm + ".tproj", spec_.temb_dim, h, rng);
            st.l2.init(params_, nm + ".l2", h, h, rng);
        }
        eps_head_.init(params_, "eps_head", h, d, rng);
        if (spec_.head == HeadKind::EpsV) v_head_.init(params_, "v_head", h, d, rng);
    }

    struct Fwd {
        Tensor<S> eps;
        Tensor<S> v;
    };

    Fwd forward(const Tensor<S>& x, int t, int ctx, Tape<S>& tape) const {
        require(x.shape == spec_.input_shape, "denoiser input shape mismatch");
        Tensor<S> temb = temb_.forward(params_, t, tape);
        if (spec_.class_contexts > 0) {
            int row = ctx == kNullContext ? spec_.class_contexts : ctx;
            require(row >= 0 && row <= spec_.class_contexts, "context out of range");
            const S* e = params_.at(ctx_table_).w.data() +
                         static_cast<int64_t>(row) * spec_.temb_dim;
            for (int i = 0; i < spec_.temb_dim; ++i) temb[i] += e[i];
            Tensor<S> row_probe({1});
            row_probe[0] = static_cast<S>(row);
            tape.push(row_probe);
        }
        Tensor<S> h = in_.forward(params_, x, tape);
        Tensor<S> tb = tproj_in_.forward(params_, temb, tape);
        axpy(S(1), tb, h);
        h = act_.forward(h, tape);
        for (const auto& st : stages_) {
            Tensor<S> a = st.l1.forward(params_, h, tape);
            Tensor<S> stb = st.tp.forward(params_, temb, tape);
            axpy(S(1), stb, a);
            a = act_.forward(a, tape);
            a = st.l2.forward(params_, a, tape);
            axpy(S(1), h, a);
            h = std::move(a);
        }
        Fwd out;
        out.eps = eps_head_.forward(params_, h, tape);
        if (spec_.head == HeadKind::EpsV) out.v = v_head_.forward(params_, h, tape);
        return out;
    }

    Tensor<S> backward(const Tensor<S>& deps, const Tensor<S>* dv, Tape<S>& tape,
                       GradBuffer<S>* gb) const {
        Tensor<S> dh({spec_.hidden[0]});
        if (spec_.head == HeadKind::EpsV) {
            Tensor<S> zero_dv(spec_.input_shape);
            Tensor<S> dh_v = v_head_.backward(params_, dv ? *dv : zero_dv, tape, gb);
            axpy(S(1), dh_v, dh);
        }
        Tensor<S> dh_eps = eps_head_.backward(params_, deps, tape, gb);
        axpy(S(1), dh_eps, dh);
        Tensor<S> dtemb({spec_.temb_dim});
        for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
            Tensor<S> d = it->l2.backward(params_, dh, tape, gb);
            d = act_.backward(d, tape);
            Tensor<S> dt = it->tp.backward(params_, d, tape, gb);
            axpy(S(1), dt, dtemb);
            Tensor<S> dprev = it->l1.backward(params_, d, tape, gb);
            axpy(S(1), dh, dprev);  // residual branch
            dh = std::move(dprev);
        }
        dh = act_.backward(dh, tape);
        Tensor<S> dt = tproj_in_.backward(params_, dh, tape, gb);
        axpy(S(1), dt, dtemb);
        Tensor<S> dx = in_.backward(params_, dh, tape, gb);
        if (spec_.class_contexts > 0) {
            Tensor<S> row_probe = tape.pop();
            if (gb) {
                int row = static_cast<int>(row_probe[0]);
                S* gt = gb->g[static_cast<size_t>(ctx_table_)].data() +
                        static_cast<int64_t>(row) * spec_.temb_dim;
                for (int i = 0; i < spec_.temb_dim; ++i) gt[i] += dtemb[i];
            }
        }
        temb_.backward(params_, dtemb, tape, gb);
        return dx;
    }

    void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const override {
        Tape<S> tape;
        Fwd out = forward(x, t, kNullContext, tape);
        eps = std::move(out.eps);
        if (v && spec_.head == HeadKind::EpsV) *v = std::move(out.v);
    }

    bool has_v_head() const override { return spec_.head == HeadKind::EpsV; }

    ParamSet<S>& params() { return params_; }
    const ParamSet<S>& params() const { return params_; }
    const ModelSpec& spec() const { return spec_; }

  private:
    struct Stage {
        Dense<S> l1, l2, tp;
    };

    ModelSpec spec_;
    ParamSet<S> params_;
    TimeEmbed<S> temb_;
    int ctx_table_ = -1;
    Dense<S> in_, tproj_in_, eps_head_, v_head_;
    std::vector<Stage> stages_;
    Silu<S> act_;
};

// Fixes one conditioning context of a conditional denoiser so it matches the
// unconditional Denoiser interface.
template <typename S>
class ConditionedDenoiser : public Denoiser<S> {
  public:
    ConditionedDenoiser(const MlpDenoiser<S>& base, int ctx) : base_(base), ctx_(ctx) {}

    void denoise(const Tensor<S>& x, int t, Tensor<S>& eps, Tensor<S>* v) const override {
        Tape<S> tape;
        auto out = base_.forward(x, t, ctx_, tape);
        eps = std::move(out.eps);
        if (v && base_.has_v_head()) *v = std::move(out.v);
    }

    bool has_v_head() const override { return base_.has_v_head(); }

  private:
    const MlpDenoiser<S>& base_;
    int ctx_;
};

// ---------------------------------------------------------------------------
// Classifier / regressor. Image variant: 3 strided conv stages + global
// average pool + linear head. Vector variant: 3-layer MLP. Optional time
// conditioning (guidance classifiers) and spectral-norm flagging.
// ---------------------------------------------------------------------------
template <typename S>
class ClassifierNet : public GuidanceGrad<S> {
  public:
    ClassifierNet(ModelSpec spec, uint64_t init_seed) : spec_(std::move(spec)) {
        spec_.validate();
        require_config(spec_.head == HeadKind::Logits || spec_.head == HeadKind::Scalar,
                       "ClassifierNet head must be logits or scalar");
        Rng rng(init_seed);
        const int out_dim = spec_.head == HeadKind::Logits ? spec_.categories : 1;
        if (spec_.temb_dim > 0) temb_.init(params_, "temb", spec_.temb_dim, spec_.schedule_T, rng);
        if (spec_.modality == Modality::Image) {
            const int c = spec_.hidden[0];
            conv1_.init(params_, "conv1", spec_.input_shape[2], c, 1, rng);
            if (spec_.temb_dim > 0) tproj_.init(params_, "tproj", spec_.temb_dim, c, rng);
            conv2_.init(params_, "conv2", c, 2 * c, 2, rng);
            conv3_.init(params_, "conv3", 2 * c, 4 * c, 2, rng);
            // flattened head keeps spatial information (the task is a
            // position decision, no pooling)
            feat_shape_ = {(spec_.input_shape[0] + 3) / 4, (spec_.input_shape[1] + 3) / 4, 4 * c};
            head_.init(params_, "head",
                       feat_shape_[0] * feat_shape_[1] * feat_shape_[2], out_dim, rng);
        } else {
            const int h = spec_.hidden[0];
            fc1_.init(params_, "fc1", spec_.input_shape[0], h, rng);
            if (spec_.temb_dim > 0) tproj_.init(params_, "tproj", spec_.temb_dim, h, rng);
            fc2_.init(params_, "fc2", h, h, rng);
            head_.init(params_, "head", h, out_dim, rng);
        }
    }

    Tensor<S> forward(const Tensor<S>& x, int t, Tape<S>& tape) const {
        require(x.shape == spec_.input_shape, "classifier input shape mismatch");
        Tensor<S> temb;
        if (spec_.temb_dim > 0) temb = temb_.forward(params_, t, tape);
        if (spec_.modality == Modality::Image) {
            Tensor<S> h = conv1_.forward(params_, x, tape);
            if (spec_.temb_dim > 0) {
                Tensor<S> bias = tproj_.forward(params_, temb, tape);
                add_channel_bias(h, bias);
            }
            h = act_.forward(h, tape);
            h = conv2_.forward(params_, h, tape);
            h = act_.forward(h, tape);
            h = conv3_.forward(params_, h, tape);
            h = act_.forward(h, tape);
            h.shape = {static_cast<int>(h.size())};  // flatten
            return head_.forward(params_, h, tape);
        }
        Tensor<S> h = fc1_.forward(params_, x, tape);
        if (spec_.temb_dim > 0) {
            Tensor<S> tb = tproj_.forward(params_, temb, tape);
            axpy(S(1), tb, h);
        }
        h = act_.forward(h, tape);
        h = fc2_.forward(params_, h, tape);
        h = act_.forward(h, tape);
        return head_.forward(params_, h, tape);
    }

    Tensor<S> backward(const Tensor<S>& dout, Tape<S>& tape, GradBuffer<S>* gb) const {
        Tensor<S> dtemb;
        if (spec_.temb_dim > 0) dtemb = Tensor<S>({spec_.temb_dim});
        Tensor<S> dx;
        if (spec_.modality == Modality::Image) {
            Tensor<S> d = head_.backward(params_, dout, tape, gb);
            d = act_.backward(d, tape);
            d = conv3_.backward(params_, d, tape, gb);
            d = act_.backward(d, tape);
            d = conv2_.backward(params_, d, tape, gb);
            d = act_.backward(d, tape);
            if (spec_.temb_dim > 0) {
                Tensor<S> dbias = reduce_channel_bias_grad(d);
                Tensor<S> dt = tproj_.backward(params_, dbias, tape, gb);
                axpy(S(1), dt, dtemb);
            }
            dx = conv1_.backward(params_, d, tape, gb);
        } else {
            Tensor<S> d = head_.backward(params_, dout, tape, gb);
            d = act_.backward(d, tape);
            d = fc2_.backward(params_, d, tape, gb);
            d = act_.backward(d, tape);
            if (spec_.temb_dim > 0) {
                Tensor<S> dt = tproj_.backward(params_, d, tape, gb);
                axpy(S(1), dt, dtemb);
            }
            dx = fc1_.backward(params_, d, tape, gb);
        }
        if (spec_.temb_dim > 0) temb_.backward(params_, dtemb, tape, gb);
        return dx;
    }

    // gradient of log softmax(logits)[category] w.r.t. the input
    Tensor<S> grad_logp(const Tensor<S>& x, int t, int category) const override {
        require(spec_.head == HeadKind::Logits, "grad_logp needs a logits head");
        require(category >= 0 && category < spec_.categories, "category out of range");
        Tape<S> tape;
        Tensor<S> logits = forward(x, t, tape);
        Tensor<S> p = softmax(logits);
        Tensor<S> dlogits(p.shape);
        for (int64_t i = 0; i < p.size(); ++i) dlogits[i] = -p[i];
        dlogits[category] += S(1);
        return backward(dlogits, tape, nullptr);
    }

    int categories() const override { return spec_.categories; }

    // Weight matrices governed by the spectral-norm flag.
    std::vector<int> spectral_weight_ids() const {
        std::vector<int> ids;
        if (spec_.modality == Modality::Image) {
            ids = {conv1_.weight_id(), conv2_.weight_id(), conv3_.weight_id(), head_.weight_id()};
        } else {
            ids = {fc1_.weight_id(), fc2_.weight_id(), head_.weight_id()};
        }
        return ids;
    }

    ParamSet<S>& params() { return params_; }
    const ParamSet<S>& params() const { return params_; }
    const ModelSpec& spec() const { return spec_; }

  private:
    ModelSpec spec_;
    ParamSet<S> params_;
    TimeEmbed<S> temb_;
    Conv3x3<S> conv1_, conv2_, conv3_;
    Dense<S> fc1_, fc2_, tproj_, head_;
    std::vector<int> feat_shape_;
    Silu<S> act_;
};

}  // namespace dzsi
