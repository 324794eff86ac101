#pragma once

// Invariant suites shared by the CLI `selftest` command and the acceptance
// runner: finite-difference gradient checks, the surprisal-likelihood
// identity, affine invariance, the low-rank Woodbury path against a dense
// oracle, chi-square moment sanity, and PAV against exhaustive monotone
// least squares.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "snapuq/calibrate.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/trainer.hpp"

namespace snapuq {

struct check_result {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

// Dense Cholesky oracle, deliberately separate from the low-rank path.
struct dense_chol {
    tensor_d l;  // lower triangular
    bool ok = false;
};

inline dense_chol dense_cholesky(const tensor_d& a) {
    const std::int64_t n = a.dim(0);
    dense_chol out;
    out.l = tensor_d({n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j <= i; ++j) {
            double sum = a(i, j);
            for (std::int64_t k = 0; k < j; ++k) sum -= out.l(i, k) * out.l(j, k);
            if (i == j) {
                if (sum <= 0.0) return out;
                out.l(i, j) = std::sqrt(sum);
            } else {
                out.l(i, j) = sum / out.l(j, j);
            }
        }
    }
    out.ok = true;
    return out;
}

inline vec dense_forward_solve(const tensor_d& l, const vec& b) {
    const std::int64_t n = l.dim(0);
    vec y(b.size(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        double sum = b[static_cast<std::size_t>(i)];
        for (std::int64_t k = 0; k < i; ++k) sum -= l(i, k) * y[static_cast<std::size_t>(k)];
        y[static_cast<std::size_t>(i)] = sum / l(i, i);
    }
    return y;
}

struct fd_stats {
    double max_rel = 0.0;
    double max_abs_small = 0.0;
    std::size_t n_coords = 0;
};

inline void fd_compare(double analytic, double numeric, fd_stats& st) {
    const double denom = std::max(std::fabs(analytic), std::fabs(numeric));
    if (denom > 1e-6)
        st.max_rel = std::max(st.max_rel, std::fabs(analytic - numeric) / denom);
    else
        st.max_abs_small = std::max(st.max_abs_small, std::fabs(analytic - numeric));
    ++st.n_coords;
}

template <typename F>
double central_diff(double& x, F&& f) {
    const double h = 1e-5 * std::max(1.0, std::fabs(x));
    const double old = x;
    x = old + h;
    const double f1 = f();
    x = old - h;
    const double f2 = f();
    x = old;
    return (f1 - f2) / (2.0 * h);
}

}  // namespace detail

// Analytic head gradients vs central differences across densities, head
// weights, projector, biases, and both activation inputs.
inline check_result check_gradients(int n_instances = 120, double tol = 1e-5, std::uint64_t seed = 4242) {
    check_result res;
    res.name = "gradients";
    detail::fd_stats st;
    rng root(seed);
    for (int inst = 0; inst < n_instances; ++inst) {
        rng g = root.split(static_cast<std::uint64_t>(inst) + 1);
        const std::int64_t d = 2 + g.below(5);
        const std::int64_t r = 1 + g.below(4);
        const std::int64_t dp = 2 + g.below(4);
        const density_kind dens = inst % 3 == 0   ? density_kind::diag_gauss
                                  : inst % 3 == 1 ? density_kind::student_t
                                                  : density_kind::huber;
        tap_head h = init_head(2, dp, d, r, false, g.next_u64(), dens);
        h.nu = 3.0 + 2.0 * g.uniform01();
        h.delta = 0.8 + 0.6 * g.uniform01();
        std::vector<param_view> params;
        collect_params(h, params);
        for (auto& v : params)
            for (std::size_t k = 0; k < v.n; ++k) v.p[k] += 0.3 * g.normal();
        vec ap(static_cast<std::size_t>(dp)), at(static_cast<std::size_t>(d));
        for (auto& v : ap) v = g.normal();
        for (auto& v : at) v = g.normal();

        const auto loss = [&]() {
            const vec z = project(h, ap);
            const head_output ho = head_forward(h, z);
            return density_core(h, at, ho);
        };
        const head_output ho = head_forward(h, project(h, ap));
        const head_grads an = head_gradients(h, ap, at, ho);

        const auto walk = [&](double* p, std::size_t n, const double* a) {
            for (std::size_t k = 0; k < n; ++k) detail::fd_compare(a[k], detail::central_diff(p[k], loss), st);
        };
        walk(h.P.data.data(), h.P.data.size(), an.g_p.data.data());
        walk(h.w_mu.data.data(), h.w_mu.data.size(), an.g_wmu.data.data());
        walk(h.b_mu.data(), h.b_mu.size(), an.g_bmu.data());
        walk(h.w_xi.data.data(), h.w_xi.data.size(), an.g_wxi.data.data());
        walk(h.b_xi.data(), h.b_xi.size(), an.g_bxi.data());
        walk(ap.data(), ap.size(), an.d_prev.data());
        walk(at.data(), at.size(), an.d_target.data());
    }
    res.pass = st.max_rel <= tol && st.max_abs_small <= 1e-8;
    std::ostringstream os;
    os << st.n_coords << " coords, max rel " << st.max_rel << ", max abs(small) " << st.max_abs_small;
    res.detail = os.str();
    return res;
}

// 2*nll_core - e - sum(s) must vanish, and the full NLL must match a dense
// diagonal-Gaussian oracle built on the matrix path.
inline check_result check_prop1(int n = 500, std::uint64_t seed = 777) {
    check_result res;
    res.name = "surprisal-likelihood identity";
    double worst_id = 0.0, worst_nll = 0.0;
    rng root(seed);
    for (int i = 0; i < n; ++i) {
        rng g = root.split(static_cast<std::uint64_t>(i) + 1);
        const std::int64_t d = 1 + g.below(8);
        vec a(static_cast<std::size_t>(d)), mu(a.size()), s(a.size());
        for (auto& v : a) v = 3.0 * g.normal();
        for (auto& v : mu) v = 3.0 * g.normal();
        for (auto& v : s) v = g.uniform(-3.0, 3.0);
        const surprisal sp = surprisal_diag(a, mu, s);
        double sum_s = 0.0;
        for (double v : s) sum_s += v;
        worst_id = std::max(worst_id, std::fabs(2.0 * sp.nll_core - sp.e - sum_s));

        tensor_d sigma({d, d});
        for (std::int64_t k = 0; k < d; ++k) sigma(k, k) = std::exp(s[static_cast<std::size_t>(k)]);
        const detail::dense_chol ch = detail::dense_cholesky(sigma);
        if (!ch.ok) {
            res.detail = "dense oracle factorization failed";
            return res;
        }
        vec v(a.size());
        for (std::size_t k = 0; k < a.size(); ++k) v[k] = a[k] - mu[k];
        const vec y = detail::dense_forward_solve(ch.l, v);
        double quad = 0.0, logdet = 0.0;
        for (std::size_t k = 0; k < y.size(); ++k) quad += y[k] * y[k];
        for (std::int64_t k = 0; k < d; ++k) logdet += 2.0 * std::log(ch.l(k, k));
        const double oracle =
            0.5 * (quad + logdet + static_cast<double>(d) * std::log(2.0 * 3.14159265358979323846));
        worst_nll = std::max(worst_nll, std::fabs(full_nll_from_core(sp.nll_core, d) - oracle));
    }
    res.pass = worst_id <= 1e-10 && worst_nll <= 1e-10;
    std::ostringstream os;
    os << "identity gap " << worst_id << ", dense NLL gap " << worst_nll;
    res.detail = os.str();
    return res;
}

// e is invariant when activation, mean, and scale transform together.
inline check_result check_prop3(int n = 1000, std::uint64_t seed = 31415) {
    check_result res;
    res.name = "affine invariance";
    double worst = 0.0;
    rng root(seed);
    for (int i = 0; i < n; ++i) {
        rng g = root.split(static_cast<std::uint64_t>(i) + 1);
        const std::int64_t d = 1 + g.below(12);
        vec a(static_cast<std::size_t>(d)), mu(a.size()), s(a.size());
        for (auto& v : a) v = 2.0 * g.normal();
        for (auto& v : mu) v = 2.0 * g.normal();
        for (auto& v : s) v = g.uniform(-3.0, 3.0);
        double t = g.uniform(-3.0, 3.0);
        if (std::fabs(t) < 0.1) t = t < 0.0 ? -0.1 : 0.1;
        const double c = g.uniform(-5.0, 5.0);
        vec a2(a.size()), mu2(a.size()), s2(a.size());
        for (std::size_t k = 0; k < a.size(); ++k) {
            a2[k] = t * a[k] + c;
            mu2[k] = t * mu[k] + c;
            s2[k] = s[k] + 2.0 * std::log(std::fabs(t));
        }
        worst = std::max(worst, std::fabs(surprisal_diag(a, mu, s).e - surprisal_diag(a2, mu2, s2).e));
    }
    res.pass = worst <= 1e-9;
    std::ostringstream os;
    os << "max |e - e'| = " << worst;
    res.detail = os.str();
    return res;
}

// Low-rank-plus-diagonal quadratic form and log-determinant against a dense
// Cholesky oracle; the correction must never be negative.
inline check_result check_woodbury(int n = 1000, std::uint64_t seed = 2718) {
    check_result res;
    res.name = "woodbury";
    double worst_quad = 0.0, worst_logdet = 0.0, worst_delta = 0.0;
    rng root(seed);
    for (int i = 0; i < n; ++i) {
        rng g = root.split(static_cast<std::uint64_t>(i) + 1);
        const std::int64_t d = 1 + g.below(8);
        const std::int64_t k = 1 + g.below(3);
        vec a(static_cast<std::size_t>(d)), mu(a.size()), s(a.size());
        for (auto& v : a) v = 2.0 * g.normal();
        for (auto& v : mu) v = 2.0 * g.normal();
        for (auto& v : s) v = g.uniform(-2.0, 2.0);
        tensor_d b({d, k});
        for (auto& v : b.data) v = 0.7 * g.normal();

        const lowrank_surprisal lr = surprisal_lowrank(a, mu, s, b);

        tensor_d sigma({d, d});
        for (std::int64_t r = 0; r < d; ++r) {
            sigma(r, r) = std::exp(s[static_cast<std::size_t>(r)]);
            for (std::int64_t cidx = 0; cidx < d; ++cidx)
                for (std::int64_t j = 0; j < k; ++j) sigma(r, cidx) += b(r, j) * b(cidx, j);
        }
        const detail::dense_chol ch = detail::dense_cholesky(sigma);
        if (!ch.ok) {
            res.detail = "dense oracle factorization failed";
            return res;
        }
        vec v(a.size());
        double diag_quad = 0.0;
        for (std::size_t r = 0; r < a.size(); ++r) {
            v[r] = a[r] - mu[r];
            diag_quad += v[r] * v[r] / std::exp(s[r]);
        }
        const vec y = detail::dense_forward_solve(ch.l, v);
        double quad = 0.0, logdet = 0.0;
        for (double yy : y) quad += yy * yy;
        for (std::int64_t r = 0; r < d; ++r) logdet += 2.0 * std::log(ch.l(r, r));

        worst_quad = std::max(worst_quad, std::fabs(lr.quad - quad));
        worst_logdet = std::max(worst_logdet, std::fabs(lr.logdet - logdet));
        worst_delta = std::max(worst_delta, lr.quad - diag_quad);  // must stay <= 0 + roundoff
    }
    res.pass = worst_quad <= 1e-8 && worst_logdet <= 1e-8 && worst_delta <= 1e-10;
    std::ostringstream os;
    os << "quad gap " << worst_quad << ", logdet gap " << worst_logdet << ", max(quad - diag quad) " << worst_delta;
    res.detail = os.str();
    return res;
}

// Under the model, d * ebar is chi-square with d degrees of freedom.
inline check_result check_chi2(std::int64_t d = 64, int n = 10000, std::uint64_t seed = 555) {
    check_result res;
    res.name = "chi-square moments";
    rng g = rng(seed).split(0xC4152ull);
    vec mu(static_cast<std::size_t>(d)), s(mu.size());
    for (auto& v : mu) v = g.normal();
    for (auto& v : s) v = g.uniform(-1.0, 1.0);
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        vec a(mu.size());
        for (std::size_t k = 0; k < a.size(); ++k) a[k] = mu[k] + std::exp(0.5 * s[k]) * g.normal();
        const double eb = surprisal_diag(a, mu, s).ebar;
        mean += eb;
        m2 += eb * eb;
    }
    mean /= n;
    const double var = m2 / n - mean * mean;
    const double dd = static_cast<double>(d);
    res.pass = std::fabs(mean - 1.0) <= 0.05 && var >= 1.0 / dd && var <= 4.0 / dd;
    std::ostringstream os;
    os << "mean " << mean << ", var " << var << " (target 1, 2/d = " << 2.0 / dd << ")";
    res.detail = os.str();
    return res;
}

// PAV against exhaustive monotone least squares over all block partitions of
// every binary sequence up to length 8.
inline check_result check_pav(int max_len = 8) {
    check_result res;
    res.name = "isotonic PAV";
    double worst = 0.0;
    for (int n = 1; n <= max_len; ++n) {
        std::vector<double> psi(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) psi[static_cast<std::size_t>(i)] = i;
        for (unsigned mask = 0; mask < (1u << n); ++mask) {
            std::vector<double> y(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = (mask >> i) & 1u ? 1.0 : 0.0;
            const std::vector<double> fit = pav_fit(psi, y);

            double best_sse = std::numeric_limits<double>::infinity();
            std::vector<double> best(static_cast<std::size_t>(n), 0.0);
            const unsigned cuts_max = n > 1 ? 1u << (n - 1) : 1u;
            for (unsigned cuts = 0; cuts < cuts_max; ++cuts) {
                std::vector<double> f(static_cast<std::size_t>(n), 0.0);
                double prev_mean = -std::numeric_limits<double>::infinity();
                bool feasible = true;
                int start = 0;
                for (int i = 0; i < n; ++i) {
                    const bool cut_here = i == n - 1 || ((cuts >> i) & 1u);
                    if (!cut_here) continue;
                    double m = 0.0;
                    for (int k = start; k <= i; ++k) m += y[static_cast<std::size_t>(k)];
                    m /= static_cast<double>(i - start + 1);
                    if (m < prev_mean - 1e-15) {
                        feasible = false;
                        break;
                    }
                    for (int k = start; k <= i; ++k) f[static_cast<std::size_t>(k)] = m;
                    prev_mean = m;
                    start = i + 1;
                }
                if (!feasible) continue;
                double sse = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double dlt = f[static_cast<std::size_t>(i)] - y[static_cast<std::size_t>(i)];
                    sse += dlt * dlt;
                }
                if (sse < best_sse) {
                    best_sse = sse;
                    best = f;
                }
            }
            for (int i = 0; i < n; ++i)
                worst = std::max(worst, std::fabs(fit[static_cast<std::size_t>(i)] - best[static_cast<std::size_t>(i)]));
            for (int i = 1; i < n; ++i)
                if (fit[static_cast<std::size_t>(i)] < fit[static_cast<std::size_t>(i - 1)] - 1e-12) {
                    res.detail = "fitted sequence decreases";
                    return res;
                }
        }
    }
    res.pass = worst <= 1e-10;
    std::ostringstream os;
    os << "max gap to exhaustive optimum " << worst;
    res.detail = os.str();
    return res;
}

inline std::vector<check_result> run_selftests() {
    return {check_gradients(), check_prop1(), check_prop3(), check_woodbury(), check_chi2(), check_pav()};
}

}  // namespace snapuq
