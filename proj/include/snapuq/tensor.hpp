#pragma once

// Dense row-major tensors plus the handful of vector and matrix kernels the
// rest of the library needs. Training math runs in double; frozen exports are
// stored as float32 in the container.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "snapuq/error.hpp"

namespace snapuq {

using vec = std::vector<double>;

template <typename T>
struct tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    tensor() = default;
    explicit tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (std::int64_t d : s) {
            check_arg(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    T& operator()(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator()(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& operator()(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    const T& operator()(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }

    // Channel-major (c, y, x) access for feature maps.
    T& at3(std::int64_t c, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((c * shape[1] + y) * shape[2] + x)];
    }
    const T& at3(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((c * shape[1] + y) * shape[2] + x)];
    }

    // (out_ch, in_ch, ky, kx) access for conv kernels.
    T& at4(std::int64_t o, std::int64_t i, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>(((o * shape[1] + i) * shape[2] + y) * shape[3] + x)];
    }
    const T& at4(std::int64_t o, std::int64_t i, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>(((o * shape[1] + i) * shape[2] + y) * shape[3] + x)];
    }
};

using tensor_d = tensor<double>;
using tensor_f = tensor<float>;

template <typename A, typename B>
tensor<B> tensor_cast(const tensor<A>& t) {
    tensor<B> out;
    out.shape = t.shape;
    out.data.reserve(t.data.size());
    for (A v : t.data) out.data.push_back(static_cast<B>(v));
    return out;
}

// y = W x for W with shape (rows, cols).
inline vec matvec(const tensor_d& w, const vec& x) {
    check_arg(w.rank() == 2 && static_cast<std::size_t>(w.dim(1)) == x.size(), "matvec: shape mismatch");
    vec y(static_cast<std::size_t>(w.dim(0)), 0.0);
    for (std::int64_t i = 0; i < w.dim(0); ++i) {
        double acc = 0.0;
        const double* row = w.data.data() + i * w.dim(1);
        for (std::int64_t j = 0; j < w.dim(1); ++j) acc += row[j] * x[static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

// y = W^T x.
inline vec matvec_t(const tensor_d& w, const vec& x) {
    check_arg(w.rank() == 2 && static_cast<std::size_t>(w.dim(0)) == x.size(), "matvec_t: shape mismatch");
    vec y(static_cast<std::size_t>(w.dim(1)), 0.0);
    for (std::int64_t i = 0; i < w.dim(0); ++i) {
        const double xi = x[static_cast<std::size_t>(i)];
        const double* row = w.data.data() + i * w.dim(1);
        for (std::int64_t j = 0; j < w.dim(1); ++j) y[static_cast<std::size_t>(j)] += row[j] * xi;
    }
    return y;
}

// W += scale * u v^T.
inline void add_outer(tensor_d& w, const vec& u, const vec& v, double scale = 1.0) {
    check_arg(w.rank() == 2 && static_cast<std::size_t>(w.dim(0)) == u.size() &&
                  static_cast<std::size_t>(w.dim(1)) == v.size(),
              "add_outer: shape mismatch");
    for (std::int64_t i = 0; i < w.dim(0); ++i) {
        const double ui = scale * u[static_cast<std::size_t>(i)];
        double* row = w.data.data() + i * w.dim(1);
        for (std::int64_t j = 0; j < w.dim(1); ++j) row[j] += ui * v[static_cast<std::size_t>(j)];
    }
}

inline double dot(const vec& a, const vec& b) {
    check_arg(a.size() == b.size(), "dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline void axpy(double a, const vec& x, vec& y) {
    check_arg(x.size() == y.size(), "axpy: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double squared_norm(const vec& a) { return dot(a, a); }

inline double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// Inverse of softplus on (0, inf).
inline double inv_softplus(double y) {
    check_arg(y > 0.0, "inv_softplus: argument must be positive");
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Max-shifted log(sum exp(x_i)); safe for entries up to about 1e308.
inline double stable_logsumexp(const vec& x) {
    check_arg(!x.empty(), "stable_logsumexp: empty input");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double v : x) acc += std::exp(v - m);
    return m + std::log(acc);
}

inline vec softmax(const vec& logits) {
    const double lse = stable_logsumexp(logits);
    vec p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
    return p;
}

inline bool all_finite(const vec& x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

// Mutable window into one flat parameter or gradient array; optimizers and
// norm computations iterate these instead of knowing the owning structs.
struct param_view {
    double* p;
    std::size_t n;
};

}  // namespace snapuq
