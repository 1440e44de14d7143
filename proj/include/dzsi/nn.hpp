#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dzsi/common.hpp"
#include "dzsi/rng.hpp"
#include "dzsi/tensor.hpp"

namespace dzsi {

// Named parameter tensors. Entry order is the manifest order and is fixed
// by construction order, so checkpoints and gradient buffers line up
// deterministically.
template <typename S>
struct ParamSet {
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<S> w;
    };
    std::vector<Entry> entries;

    int add(const std::string& name, std::vector<int> shape) {
        for (const auto& e : entries)
            require(e.name != name, "duplicate parameter name: " + name);
        Entry e;
        e.name = name;
        e.shape = std::move(shape);
        e.w.assign(static_cast<size_t>(Tensor<S>::count(e.shape)), S(0));
        entries.push_back(std::move(e));
        return static_cast<int>(entries.size()) - 1;
    }

    Entry& at(int id) { return entries[static_cast<size_t>(id)]; }
    const Entry& at(int id) const { return entries[static_cast<size_t>(id)]; }

    int find(const std::string& name) const {
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<int>(i);
        return -1;
    }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& e : entries) n += static_cast<int64_t>(e.w.size());
        return n;
    }

    bool all_finite() const {
        for (const auto& e : entries)
            for (S x : e.w)
                if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        for (const auto& e : entries) {
            int id = out.add(e.name, e.shape);
            auto& oe = out.at(id);
            for (size_t i = 0; i < e.w.size(); ++i) oe.w[i] = static_cast<T>(e.w[i]);
        }
        return out;
    }
};

// Flat gradient accumulators mirroring a ParamSet.
template <typename S>
struct GradBuffer {
    std::vector<std::vector<S>> g;

    explicit GradBuffer(const ParamSet<S>& ps) {
        g.reserve(ps.entries.size());
        for (const auto& e : ps.entries) g.emplace_back(e.w.size(), S(0));
    }
    GradBuffer() = default;

    void zero() {
        for (auto& v : g) std::fill(v.begin(), v.end(), S(0));
    }

    void add(const GradBuffer& o) {
        for (size_t i = 0; i < g.size(); ++i)
            for (size_t j = 0; j < g[i].size(); ++j) g[i][j] += o.g[i][j];
    }

    void scale(S a) {
        for (auto& v : g)
            for (auto& x : v) x *= a;
    }

    bool all_finite() const {
        for (const auto& v : g)
            for (S x : v)
                if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
};

// Activation stack: layers push what forward saves and pop it back in
// reverse order during the backward walk.
template <typename S>
struct Tape {
    std::vector<Tensor<S>> stack;

    void push(Tensor<S> t) { stack.push_back(std::move(t)); }
    Tensor<S> pop() {
        require(!stack.empty(), "tape underflow");
        Tensor<S> t = std::move(stack.back());
        stack.pop_back();
        return t;
    }
    void clear() { stack.clear(); }
    bool empty() const { return stack.empty(); }
};

namespace init {

// Kaiming-style fan-in scaling.
template <typename S>
inline void kaiming(std::vector<S>& w, int fan_in, Rng& rng) {
    double std = std::sqrt(2.0 / fan_in);
    for (auto& x : w) x = static_cast<S>(rng.normal() * std);
}

}  // namespace init

// ---------------------------------------------------------------------------
// Layers. Each reads its parameters from the shared ParamSet, saves forward
// context on the tape, and accumulates parameter gradients into an optional
// GradBuffer (skipped when only the input gradient is needed).
// ---------------------------------------------------------------------------

template <typename S>
class Dense {
  public:
    void init(ParamSet<S>& ps, const std::string& name, int in, int out, Rng& rng) {
        in_ = in;
        out_ = out;
        w_ = ps.add(name + ".w", {out, in});
        b_ = ps.add(name + ".b", {out});
        init::kaiming(ps.at(w_).w, in, rng);
    }

    Tensor<S> forward(const ParamSet<S>& ps, const Tensor<S>& x, Tape<S>& tape) const {
        require(x.size() == in_, "dense input size mismatch");
        const auto& W = ps.at(w_).w;
        const auto& B = ps.at(b_).w;
        Tensor<S> y({out_});
        for (int o = 0; o < out_; ++o) {
            const S* row = W.data() + static_cast<size_t>(o) * in_;
            S acc = B[static_cast<size_t>(o)];
            for (int i = 0; i < in_; ++i) acc += row[i] * x[i];
            y[o] = acc;
        }
        tape.push(x);
        return y;
    }

    Tensor<S> backward(const ParamSet<S>& ps, const Tensor<S>& dy, Tape<S>& tape,
                       GradBuffer<S>* gb) const {
        Tensor<S> x = tape.pop();
        const auto& W = ps.at(w_).w;
        Tensor<S> dx({in_});
        for (int o = 0; o < out_; ++o) {
            const S* row = W.data() + static_cast<size_t>(o) * in_;
            S g = dy[o];
            for (int i = 0; i < in_; ++i) dx[i] += row[i] * g;
        }
        if (gb) {
            auto& gw = gb->g[static_cast<size_t>(w_)];
            auto& gbias = gb->g[static_cast<size_t>(b_)];
            for (int o = 0; o < out_; ++o) {
                S g = dy[o];
                S* row = gw.data() + static_cast<size_t>(o) * in_;
                for (int i = 0; i < in_; ++i) row[i] += g * x[i];
                gbias[static_cast<size_t>(o)] += g;
            }
        }
        return dx;
    }

    int weight_id() const { return w_; }
    int in_dim() const { return in_; }
    int out_dim() const { return out_; }

  private:
    int w_ = -1, b_ = -1;
    int in_ = 0, out_ = 0;
};

namespace detail {

// Raw conv kernels with restrict-qualified parameters so the channel loops
// vectorize without runtime alias checks.
template <typename S>
void conv3x3_fwd(const S* __restrict__ in, const S* __restrict__ w, const S* __restrict__ b,
                 S* __restrict__ out, int H, int W, int Ci, int Co, int stride) {
    const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
    for (int yo = 0; yo < Ho; ++yo) {
        for (int xo = 0; xo < Wo; ++xo) {
            S* __restrict__ o = out + (static_cast<int64_t>(yo) * Wo + xo) * Co;
            for (int c = 0; c < Co; ++c) o[c] = b[c];
            const int yi = yo * stride, xi = xo * stride;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = yi + dy;
                if (yy < 0 || yy >= H) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = xi + dx;
                    if (xx < 0 || xx >= W) continue;
                    const S* __restrict__ iv = in + (static_cast<int64_t>(yy) * W + xx) * Ci;
                    const S* __restrict__ wk =
                        w + ((static_cast<int64_t>(dy) + 1) * 3 + (dx + 1)) * Ci * Co;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const S v = iv[ci];
                        const S* __restrict__ wr = wk + static_cast<int64_t>(ci) * Co;
                        for (int c = 0; c < Co; ++c) o[c] += v * wr[c];
                    }
                }
            }
        }
    }
}

// dx accumulation against the transposed kernel wt[tap][co][ci].
template <typename S>
void conv3x3_bwd_dx(const S* __restrict__ dy, const S* __restrict__ wt, S* __restrict__ dx,
                    int H, int W, int Ci, int Co, int stride) {
    const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
    for (int yo = 0; yo < Ho; ++yo) {
        for (int xo = 0; xo < Wo; ++xo) {
            const S* __restrict__ g = dy + (static_cast<int64_t>(yo) * Wo + xo) * Co;
            const int yi = yo * stride, xi = xo * stride;
            for (int dyk = -1; dyk <= 1; ++dyk) {
                const int yy = yi + dyk;
                if (yy < 0 || yy >= H) continue;
                for (int dxk = -1; dxk <= 1; ++dxk) {
                    const int xx = xi + dxk;
                    if (xx < 0 || xx >= W) continue;
                    const int k = (dyk + 1) * 3 + (dxk + 1);
                    S* __restrict__ dv = dx + (static_cast<int64_t>(yy) * W + xx) * Ci;
                    for (int co = 0; co < Co; ++co) {
                        const S gc = g[co];
                        const S* __restrict__ wr = wt + (static_cast<size_t>(k) * Co + co) * Ci;
                        for (int ci = 0; ci < Ci; ++ci) dv[ci] += gc * wr[ci];
                    }
                }
            }
        }
    }
}

// dW / db accumulation.
template <typename S>
void conv3x3_bwd_dw(const S* __restrict__ in, const S* __restrict__ dy, S* __restrict__ gw,
                    S* __restrict__ gbias, int H, int W, int Ci, int Co, int stride) {
    const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
    for (int yo = 0; yo < Ho; ++yo) {
        for (int xo = 0; xo < Wo; ++xo) {
            const S* __restrict__ g = dy + (static_cast<int64_t>(yo) * Wo + xo) * Co;
            for (int c = 0; c < Co; ++c) gbias[c] += g[c];
            const int yi = yo * stride, xi = xo * stride;
            for (int dyk = -1; dyk <= 1; ++dyk) {
                const int yy = yi + dyk;
                if (yy < 0 || yy >= H) continue;
                for (int dxk = -1; dxk <= 1; ++dxk) {
                    const int xx = xi + dxk;
                    if (xx < 0 || xx >= W) continue;
                    const int64_t koff =
                        ((static_cast<int64_t>(dyk) + 1) * 3 + (dxk + 1)) * Ci * Co;
                    const S* __restrict__ iv = in + (static_cast<int64_t>(yy) * W + xx) * Ci;
                    for (int ci = 0; ci < Ci; ++ci) {
                        S* __restrict__ gwr = gw + koff + static_cast<int64_t>(ci) * Co;
                        const S v = iv[ci];
                        for (int c = 0; c < Co; ++c) gwr[c] += v * g[c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 3x3 convolution over {H, W, C} maps, zero padding 1, stride 1 or 2.
// Weight layout {3, 3, Cin, Cout} keeps the output-channel loop contiguous.
template <typename S>
class Conv3x3 {
  public:
    void init(ParamSet<S>& ps, const std::string& name, int cin, int cout, int stride, Rng& rng,
              bool zero_init = false) {
        cin_ = cin;
        cout_ = cout;
        stride_ = stride;
        w_ = ps.add(name + ".w", {3, 3, cin, cout});
        b_ = ps.add(name + ".b", {cout});
        if (!zero_init) init::kaiming(ps.at(w_).w, 9 * cin, rng);
    }

    std::vector<int> out_shape(const std::vector<int>& in) const {
        return {(in[0] + stride_ - 1) / stride_, (in[1] + stride_ - 1) / stride_, cout_};
    }

    Tensor<S> forward(const ParamSet<S>& ps, const Tensor<S>& x, Tape<S>& tape) const {
        require(x.shape.size() == 3 && x.shape[2] == cin_, "conv input shape mismatch");
        const int H = x.shape[0], W = x.shape[1];
        const int Ho = (H + stride_ - 1) / stride_, Wo = (W + stride_ - 1) / stride_;
        Tensor<S> y({Ho, Wo, cout_});
        detail::conv3x3_fwd(x.data(), ps.at(w_).w.data(), ps.at(b_).w.data(), y.data(), H, W,
                            cin_, cout_, stride_);
        tape.push(x);
        return y;
    }

    Tensor<S> backward(const ParamSet<S>& ps, const Tensor<S>& dy, Tape<S>& tape,
                       GradBuffer<S>* gb) const {
        Tensor<S> x = tape.pop();
        const int H = x.shape[0], W = x.shape[1];
        const S* wp = ps.at(w_).w.data();
        Tensor<S> dx(x.shape);
        // transposed kernel [tap][co][ci] so the dx update runs contiguous
        // over ci with a broadcast upstream value, like the forward pass
        std::vector<S> wt(static_cast<size_t>(9) * cin_ * cout_);
        for (int k = 0; k < 9; ++k)
            for (int ci = 0; ci < cin_; ++ci)
                for (int co = 0; co < cout_; ++co)
                    wt[(static_cast<size_t>(k) * cout_ + co) * cin_ + ci] =
                        wp[(static_cast<size_t>(k) * cin_ + ci) * cout_ + co];
        detail::conv3x3_bwd_dx(dy.data(), wt.data(), dx.data(), H, W, cin_, cout_, stride_);
        if (gb)
            detail::conv3x3_bwd_dw(x.data(), dy.data(), gb->g[static_cast<size_t>(w_)].data(),
                                   gb->g[static_cast<size_t>(b_)].data(), H, W, cin_, cout_,
                                   stride_);
        return dx;
    }

    int weight_id() const { return w_; }

  private:
    int w_ = -1, b_ = -1;
    int cin_ = 0, cout_ = 0, stride_ = 1;
};

// x * sigmoid(x)
template <typename S>
struct Silu {
    Tensor<S> forward(const Tensor<S>& x, Tape<S>& tape) const {
        Tensor<S> y(x.shape);
        for (int64_t i = 0; i < x.size(); ++i) {
            S s = S(1) / (S(1) + std::exp(-x[i]));
            y[i] = x[i] * s;
        }
        tape.push(x);
        return y;
    }

    Tensor<S> backward(const Tensor<S>& dy, Tape<S>& tape) const {
        Tensor<S> x = tape.pop();
        Tensor<S> dx(x.shape);
        for (int64_t i = 0; i < x.size(); ++i) {
            S s = S(1) / (S(1) + std::exp(-x[i]));
            dx[i] = dy[i] * (s + x[i] * s * (S(1) - s));
        }
        return dx;
    }
};

template <typename S>
struct UpsampleNearest2x {
    Tensor<S> forward(const Tensor<S>& x) const {
        const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
        Tensor<S> y({2 * H, 2 * W, C});
        for (int yy = 0; yy < 2 * H; ++yy)
            for (int xx = 0; xx < 2 * W; ++xx) {
                const S* src = x.data() + (static_cast<int64_t>(yy / 2) * W + xx / 2) * C;
                S* dst = y.data() + (static_cast<int64_t>(yy) * 2 * W + xx) * C;
                for (int c = 0; c < C; ++c) dst[c] = src[c];
            }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& dy) const {
        const int H2 = dy.shape[0], W2 = dy.shape[1], C = dy.shape[2];
        Tensor<S> dx({H2 / 2, W2 / 2, C});
        for (int yy = 0; yy < H2; ++yy)
            for (int xx = 0; xx < W2; ++xx) {
                const S* src = dy.data() + (static_cast<int64_t>(yy) * W2 + xx) * C;
                S* dst = dx.data() + (static_cast<int64_t>(yy / 2) * (W2 / 2) + xx / 2) * C;
                for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
        return dx;
    }
};

// Adds a per-channel bias (the projected time embedding) across a feature map.
template <typename S>
inline void add_channel_bias(Tensor<S>& fmap, const Tensor<S>& bias) {
    const int C = fmap.shape[2];
    require(bias.size() == C, "channel bias size mismatch");
    const int HW = fmap.shape[0] * fmap.shape[1];
    for (int p = 0; p < HW; ++p)
        for (int c = 0; c < C; ++c) fmap[static_cast<int64_t>(p) * C + c] += bias[c];
}

template <typename S>
inline Tensor<S> reduce_channel_bias_grad(const Tensor<S>& dfmap) {
    const int C = dfmap.shape[2];
    Tensor<S> db({C});
    const int HW = dfmap.shape[0] * dfmap.shape[1];
    for (int p = 0; p < HW; ++p)
        for (int c = 0; c < C; ++c) db[c] += dfmap[static_cast<int64_t>(p) * C + c];
    return db;
}

// Sinusoidal features of t/T at geometrically spaced frequencies, passed
// through a 2-layer MLP.
template <typename S>
class TimeEmbed {
  public:
    void init(ParamSet<S>& ps, const std::string& name, int dim, int T, Rng& rng) {
        dim_ = dim;
        T_ = T;
        l1_.init(ps, name + ".mlp1", dim, dim, rng);
        l2_.init(ps, name + ".mlp2", dim, dim, rng);
    }

    Tensor<S> features(int t) const {
        Tensor<S> f({dim_});
        const int half = dim_ / 2;
        const double u = static_cast<double>(t) / T_;
        for (int j = 0; j < half; ++j) {
            double freq = std::exp(std::log(1e4) * j / std::max(1, half - 1));
            f[j] = static_cast<S>(std::sin(u * freq));
            f[half + j] = static_cast<S>(std::cos(u * freq));
        }
        return f;
    }

    Tensor<S> forward(const ParamSet<S>& ps, int t, Tape<S>& tape) const {
        Tensor<S> h = l1_.forward(ps, features(t), tape);
        h = silu_.forward(h, tape);
        return l2_.forward(ps, h, tape);
    }

    void backward(const ParamSet<S>& ps, const Tensor<S>& demb, Tape<S>& tape,
                  GradBuffer<S>* gb) const {
        Tensor<S> d = l2_.backward(ps, demb, tape, gb);
        d = silu_.backward(d, tape);
        l1_.backward(ps, d, tape, gb);
    }

    int dim() const { return dim_; }

  private:
    Dense<S> l1_, l2_;
    Silu<S> silu_;
    int dim_ = 0, T_ = 0;
};

// ---------------------------------------------------------------------------
// Loss heads
// ---------------------------------------------------------------------------

template <typename S>
inline Tensor<S> softmax(const Tensor<S>& logits) {
    Tensor<S> p(logits.shape);
    S m = logits[0];
    for (int64_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
    S z = 0;
    for (int64_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        z += p[i];
    }
    for (int64_t i = 0; i < logits.size(); ++i) p[i] /= z;
    return p;
}

// Returns loss; writes d(loss)/d(logits) if dlogits != nullptr.
template <typename S>
inline S cross_entropy(const Tensor<S>& logits, int label, Tensor<S>* dlogits) {
    Tensor<S> p = softmax(logits);
    S loss = -std::log(std::max(p[label], S(1e-30)));
    if (dlogits) {
        *dlogits = p;
        (*dlogits)[label] -= S(1);
    }
    return loss;
}

}  // namespace dzsi
