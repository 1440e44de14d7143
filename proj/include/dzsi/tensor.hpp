#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "dzsi/common.hpp"

namespace dzsi {

// Dense row-major tensor. Images use {H, W, C} (channels innermost so the
// conv kernels vectorize over C), vectors use {D}.
template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh) : shape(std::move(sh)), v(count(shape), S(0)) {}
    Tensor(std::vector<int> sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        require(static_cast<int64_t>(v.size()) == count(shape), "tensor data/shape mismatch");
    }

    static int64_t count(const std::vector<int>& sh) {
        int64_t n = 1;
        for (int d : sh) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    S* data() { return v.data(); }
    const S* data() const { return v.data(); }
    S& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(S x) { std::fill(v.begin(), v.end(), x); }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }
};

template <typename S>
inline void axpy(S a, const Tensor<S>& x, Tensor<S>& y) {
    require(x.size() == y.size(), "axpy size mismatch");
    for (int64_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

template <typename S>
inline S dot(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.size() == b.size(), "dot size mismatch");
    S acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename S>
inline S norm2(const Tensor<S>& a) {
    S acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * a[i];
    return std::sqrt(acc);
}

template <typename S>
inline S max_abs(const Tensor<S>& a) {
    S m = 0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <typename S>
inline bool all_finite(const Tensor<S>& a) {
    for (int64_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(static_cast<double>(a[i]))) return false;
    return true;
}

template <typename S>
inline void clamp_inplace(Tensor<S>& a, S lo, S hi) {
    for (int64_t i = 0; i < a.size(); ++i) a[i] = std::clamp(a[i], lo, hi);
}

}  // namespace dzsi
