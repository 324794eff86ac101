#pragma once

// Per-tap projector and predictor heads. A head compresses the previous
// layer's (pooled) activation to z = P a_prev, then emits a mean vector and
// log-variances for the current layer. Densities: diagonal Gaussian,
// Student-t, Huber, and a low-rank-plus-diagonal Gaussian for which the
// quadratic form and log-determinant are evaluated without forming the dense
// covariance.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "snapuq/error.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

enum class density_kind { diag_gauss, student_t, huber, lowrank };

inline const char* density_name(density_kind k) {
    switch (k) {
        case density_kind::diag_gauss: return "diag_gauss";
        case density_kind::student_t: return "student_t";
        case density_kind::huber: return "huber";
        case density_kind::lowrank: return "lowrank";
    }
    return "unknown";
}

inline density_kind density_from_name(const std::string& s) {
    if (s == "diag_gauss") return density_kind::diag_gauss;
    if (s == "student_t") return density_kind::student_t;
    if (s == "huber") return density_kind::huber;
    if (s == "lowrank") return density_kind::lowrank;
    throw config_error("unknown density: " + s);
}

struct tap_head {
    int tap = 2;
    bool pooled = false;  // conv taps read per-channel means
    tensor_d P;           // r x d_prev
    tensor_d w_mu;        // d x r
    tensor_d w_xi;        // d x r
    vec b_mu;
    vec b_xi;
    density_kind density = density_kind::diag_gauss;
    double nu = 4.0;
    double delta = 1.0;
    tensor_d B;  // d x k, lowrank only
    double epsilon = 1e-4;
    double s_lo = std::log(1e-4);
    double s_hi = std::log(1e2);

    std::int64_t dim() const { return w_mu.dim(0); }
    std::int64_t proj_rank() const { return P.dim(0); }
    std::int64_t prev_dim() const { return P.dim(1); }

    void validate() const {
        check_arg(P.rank() == 2 && w_mu.rank() == 2 && w_xi.rank() == 2, "tap_head: rank-2 weights required");
        check_arg(P.dim(0) >= 1, "tap_head: projector rank must be >= 1");
        check_arg(w_mu.dim(1) == P.dim(0) && w_xi.dim(1) == P.dim(0), "tap_head: W/projector shape mismatch");
        check_arg(w_mu.dim(0) == w_xi.dim(0), "tap_head: mu/xi width mismatch");
        check_arg(b_mu.size() == static_cast<std::size_t>(dim()) && b_xi.size() == b_mu.size(),
                  "tap_head: bias shape mismatch");
        check_arg(epsilon > 0.0, "tap_head: variance floor must be positive");
        check_arg(s_lo < s_hi, "tap_head: clamp bounds out of order");
        check_arg(nu > 0.0, "tap_head: nu must be positive");
        check_arg(delta > 0.0, "tap_head: delta must be positive");
        if (density == density_kind::lowrank) {
            check_arg(B.rank() == 2 && B.dim(0) == dim() && B.dim(1) >= 1 && B.dim(1) < dim(),
                      "tap_head: lowrank factor must be d x k with k < d");
        }
    }
};

// He-uniform projector and mean weights; log-variance weights start at zero
// so the initial variance is softplus(0) everywhere.
inline tap_head init_head(int tap, std::int64_t d_prev, std::int64_t d, std::int64_t r, bool pooled,
                          std::uint64_t seed, density_kind density = density_kind::diag_gauss) {
    tap_head h;
    h.tap = tap;
    h.pooled = pooled;
    h.density = density;
    rng gen = rng(seed).split(0x4845ull + static_cast<std::uint64_t>(tap));
    h.P = tensor_d({r, d_prev});
    {
        const double limit = std::sqrt(6.0 / static_cast<double>(d_prev));
        for (auto& v : h.P.data) v = gen.uniform(-limit, limit);
    }
    h.w_mu = tensor_d({d, r});
    {
        const double limit = std::sqrt(6.0 / static_cast<double>(r));
        for (auto& v : h.w_mu.data) v = gen.uniform(-limit, limit);
    }
    h.w_xi = tensor_d({d, r});
    h.b_mu.assign(static_cast<std::size_t>(d), 0.0);
    h.b_xi.assign(static_cast<std::size_t>(d), 0.0);
    return h;
}

struct head_output {
    vec z;
    vec mu;
    vec xi;   // pre-softplus log-variance inputs (after optional train clip)
    vec s;    // log variance, post floor and clamp
    vec var;  // exp(s); the variance every downstream formula uses
    std::vector<std::uint8_t> grad_open;  // 0 where clip/clamp blocks the variance gradient
};

inline vec project(const tap_head& head, const vec& a_prev) {
    check_arg(a_prev.size() == static_cast<std::size_t>(head.prev_dim()), "project: dimension mismatch");
    return matvec(head.P, a_prev);
}

// xi_clip bounds the log-variance pre-activations during training; pass
// +inf (the default) for inference semantics.
inline head_output head_forward(const tap_head& head, const vec& z,
                                double xi_clip = std::numeric_limits<double>::infinity()) {
    check_arg(z.size() == static_cast<std::size_t>(head.proj_rank()), "head_forward: z length mismatch");
    head_output out;
    out.z = z;
    out.mu = matvec(head.w_mu, z);
    out.xi = matvec(head.w_xi, z);
    const std::size_t d = out.mu.size();
    out.s.resize(d);
    out.var.resize(d);
    out.grad_open.assign(d, 1);
    const double eps2 = head.epsilon * head.epsilon;
    for (std::size_t i = 0; i < d; ++i) {
        out.mu[i] += head.b_mu[i];
        double xi = out.xi[i] + head.b_xi[i];
        if (xi > xi_clip) {
            xi = xi_clip;
            out.grad_open[i] = 0;
        } else if (xi < -xi_clip) {
            xi = -xi_clip;
            out.grad_open[i] = 0;
        }
        out.xi[i] = xi;
        const double var_pre = stable_softplus(xi) + eps2;
        double s = std::log(var_pre);
        if (s < head.s_lo) {
            s = head.s_lo;
            out.grad_open[i] = 0;
        } else if (s > head.s_hi) {
            s = head.s_hi;
            out.grad_open[i] = 0;
        }
        out.s[i] = s;
        out.var[i] = std::exp(s);
    }
    return out;
}

struct surprisal {
    double e = 0.0;        // squared standardized residual norm
    double ebar = 0.0;     // e / d
    double nll_core = 0.0; // (e + sum s) / 2, 2-pi constant excluded
};

inline surprisal surprisal_diag(const vec& a, const vec& mu, const vec& s) {
    check_arg(a.size() == mu.size() && a.size() == s.size() && !a.empty(), "surprisal_diag: shape mismatch");
    surprisal out;
    double sum_s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a[i] - mu[i];
        out.e += v * v * std::exp(-s[i]);
        sum_s += s[i];
    }
    if (!std::isfinite(out.e) || !std::isfinite(sum_s)) throw numeric_error("surprisal_diag: nonfinite input");
    out.ebar = out.e / static_cast<double>(a.size());
    out.nll_core = 0.5 * (out.e + sum_s);
    return out;
}

inline surprisal surprisal_diag(const vec& a, const head_output& out) { return surprisal_diag(a, out.mu, out.s); }

// Adds the constant the per-layer loss drops, giving the exact density NLL.
inline double full_nll_from_core(double nll_core, std::int64_t d) {
    return nll_core + 0.5 * static_cast<double>(d) * std::log(6.283185307179586476925286766559);
}

inline double surprisal_student_t(const vec& a, const vec& mu, const vec& s, double nu) {
    check_arg(nu > 0.0, "surprisal_student_t: nu must be positive");
    check_arg(a.size() == mu.size() && a.size() == s.size(), "surprisal_student_t: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a[i] - mu[i];
        const double q = v * v * std::exp(-s[i]);
        acc += 0.5 * (nu + 1.0) * std::log1p(q / nu) + 0.5 * s[i];
    }
    return acc;
}

inline double surprisal_student_t(const vec& a, const head_output& out, double nu) {
    return surprisal_student_t(a, out.mu, out.s, nu);
}

inline double surprisal_huber(const vec& a, const vec& mu, const vec& s, double delta) {
    check_arg(delta > 0.0, "surprisal_huber: delta must be positive");
    check_arg(a.size() == mu.size() && a.size() == s.size(), "surprisal_huber: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double r = (a[i] - mu[i]) * std::exp(-0.5 * s[i]);
        const double ar = std::fabs(r);
        const double rho = ar <= delta ? 0.5 * r * r : delta * ar - 0.5 * delta * delta;
        acc += rho + 0.5 * s[i];
    }
    return acc;
}

inline double surprisal_huber(const vec& a, const head_output& out, double delta) {
    return surprisal_huber(a, out.mu, out.s, delta);
}

namespace detail {

// In-place lower Cholesky of a k x k SPD matrix stored row-major.
inline void cholesky(tensor_d& m) {
    const std::int64_t k = m.dim(0);
    for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = 0; j <= i; ++j) {
            double acc = m(i, j);
            for (std::int64_t t = 0; t < j; ++t) acc -= m(i, t) * m(j, t);
            if (i == j) {
                if (acc <= 0.0 || !std::isfinite(acc))
                    throw numeric_error("cholesky: matrix not positive definite");
                m(i, i) = std::sqrt(acc);
            } else {
                m(i, j) = acc / m(j, j);
            }
        }
        for (std::int64_t j = i + 1; j < k; ++j) m(i, j) = 0.0;
    }
}

inline vec forward_solve(const tensor_d& l, const vec& b) {
    const std::int64_t k = l.dim(0);
    vec x(b);
    for (std::int64_t i = 0; i < k; ++i) {
        double acc = x[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < i; ++j) acc -= l(i, j) * x[static_cast<std::size_t>(j)];
        x[static_cast<std::size_t>(i)] = acc / l(i, i);
    }
    return x;
}

}  // namespace detail

struct lowrank_surprisal {
    double quad = 0.0;
    double logdet = 0.0;
};

// Quadratic form and log-determinant of diag(exp(s)) + B B^T, evaluated with
// the k x k capacitance matrix only. The correction term is nonnegative, so
// quad never exceeds the diagonal-only quadratic.
inline lowrank_surprisal surprisal_lowrank(const vec& a, const vec& mu, const vec& s, const tensor_d& B) {
    check_arg(B.rank() == 2 && B.dim(0) == static_cast<std::int64_t>(a.size()), "surprisal_lowrank: B shape");
    check_arg(a.size() == mu.size() && a.size() == s.size(), "surprisal_lowrank: shape mismatch");
    const std::int64_t d = B.dim(0), k = B.dim(1);
    vec dinv(static_cast<std::size_t>(d));
    double sum_s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        dinv[static_cast<std::size_t>(i)] = std::exp(-s[static_cast<std::size_t>(i)]);
        sum_s += s[static_cast<std::size_t>(i)];
    }
    // M = B^T D^-1 B, c = B^T D^-1 v, diag quadratic alongside.
    tensor_d cap({k, k});
    vec c(static_cast<std::size_t>(k), 0.0);
    double e_diag = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double di = dinv[static_cast<std::size_t>(i)];
        const double v = a[static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(i)];
        e_diag += v * v * di;
        const double* brow = B.data.data() + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            c[static_cast<std::size_t>(p)] += brow[p] * di * v;
            for (std::int64_t q = 0; q <= p; ++q) cap(p, q) += brow[p] * di * brow[q];
        }
    }
    for (std::int64_t p = 0; p < k; ++p) {
        for (std::int64_t q = p + 1; q < k; ++q) cap(p, q) = cap(q, p);
        cap(p, p) += 1.0;
    }
    detail::cholesky(cap);
    const vec y = detail::forward_solve(cap, c);
    double corr = 0.0, ld_cap = 0.0;
    for (std::int64_t p = 0; p < k; ++p) {
        corr += y[static_cast<std::size_t>(p)] * y[static_cast<std::size_t>(p)];
        ld_cap += 2.0 * std::log(cap(p, p));
    }
    lowrank_surprisal out;
    out.quad = e_diag - corr;
    if (out.quad < 0.0) out.quad = 0.0;  // guards roundoff; the exact value is nonnegative
    out.logdet = sum_s + ld_cap;
    return out;
}

inline lowrank_surprisal surprisal_lowrank(const vec& a, const head_output& out, const tensor_d& B) {
    return surprisal_lowrank(a, out.mu, out.s, B);
}

// Surprisal used for scoring under the head's configured density, normalized
// by width so values are comparable across taps.
inline double density_ebar(const tap_head& head, const vec& a, const head_output& out) {
    const double d = static_cast<double>(head.dim());
    switch (head.density) {
        case density_kind::diag_gauss: return surprisal_diag(a, out).ebar;
        case density_kind::student_t: return surprisal_student_t(a, out, head.nu) / d;
        case density_kind::huber: return surprisal_huber(a, out, head.delta) / d;
        case density_kind::lowrank: {
            const lowrank_surprisal lr = surprisal_lowrank(a, out, head.B);
            return 0.5 * (lr.quad + lr.logdet) / d;
        }
    }
    throw std::invalid_argument("density_ebar: bad density");
}

struct head_grads {
    vec d_mu;      // dloss/dmu
    vec d_xi;      // dloss/dxi after softplus chain and clamp mask
    vec d_z;
    vec d_prev;    // gradient on the projector input
    vec d_target;  // gradient on the predicted activation a
    tensor_d g_wmu, g_wxi, g_p;
    vec g_bmu, g_bxi;
};

// Closed-form gradients of the per-sample surprisal core for the pointwise
// densities. Clamped or clipped variance coordinates contribute zero
// gradient through xi.
inline head_grads head_gradients(const tap_head& head, const vec& a_prev, const vec& a, const head_output& out) {
    check_arg(head.density != density_kind::lowrank, "head_gradients: lowrank density is not trained in closed form");
    const std::size_t d = out.mu.size();
    check_arg(a.size() == d, "head_gradients: target shape mismatch");
    head_grads g;
    g.d_mu.assign(d, 0.0);
    g.d_xi.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double var = out.var[i];
        const double v = a[i] - out.mu[i];
        double dmu = 0.0, ds = 0.0;
        switch (head.density) {
            case density_kind::diag_gauss: {
                dmu = -v / var;
                ds = 0.5 * (1.0 - v * v / var);
                break;
            }
            case density_kind::student_t: {
                const double q = v * v / var;
                dmu = (head.nu + 1.0) * (-v) / (head.nu * var + v * v);
                ds = 0.5 * (1.0 - (head.nu + 1.0) * q / (head.nu + q));
                break;
            }
            case density_kind::huber: {
                const double sig = std::sqrt(var);
                const double r = v / sig;
                const double psi = std::fabs(r) <= head.delta ? r : head.delta * (r > 0.0 ? 1.0 : -1.0);
                dmu = -psi / sig;
                ds = -0.5 * psi * r + 0.5;
                break;
            }
            case density_kind::lowrank: break;
        }
        g.d_mu[i] = dmu;
        g.d_xi[i] = out.grad_open[i] ? ds * sigmoid(out.xi[i]) / var : 0.0;
    }
    g.d_z = matvec_t(head.w_mu, g.d_mu);
    const vec dz_xi = matvec_t(head.w_xi, g.d_xi);
    for (std::size_t i = 0; i < g.d_z.size(); ++i) g.d_z[i] += dz_xi[i];
    g.g_wmu = tensor_d(head.w_mu.shape);
    add_outer(g.g_wmu, g.d_mu, out.z);
    g.g_wxi = tensor_d(head.w_xi.shape);
    add_outer(g.g_wxi, g.d_xi, out.z);
    g.g_bmu = g.d_mu;
    g.g_bxi = g.d_xi;
    g.g_p = tensor_d(head.P.shape);
    add_outer(g.g_p, g.d_z, a_prev);
    g.d_prev = matvec_t(head.P, g.d_z);
    g.d_target.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) g.d_target[i] = -g.d_mu[i];
    return g;
}

struct head_param_views {
    std::vector<param_view> views;
};

inline void collect_params(tap_head& h, std::vector<param_view>& out) {
    out.push_back({h.P.data.data(), h.P.data.size()});
    out.push_back({h.w_mu.data.data(), h.w_mu.data.size()});
    out.push_back({h.b_mu.data(), h.b_mu.size()});
    out.push_back({h.w_xi.data.data(), h.w_xi.data.size()});
    out.push_back({h.b_xi.data(), h.b_xi.size()});
}

}  // namespace snapuq
