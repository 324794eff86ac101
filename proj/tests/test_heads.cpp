#include <cmath>
#include <limits>
#include <vector>

#include "catch_amalgamated.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/rng.hpp"

using namespace snapuq;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

tap_head small_head(std::uint64_t seed, density_kind density = density_kind::diag_gauss, std::int64_t d_prev = 4,
                    std::int64_t d = 3, std::int64_t r = 2) {
    tap_head h = init_head(2, d_prev, d, r, false, seed, density);
    rng g(seed ^ 0x5151);
    for (auto& v : h.w_xi.data) v = 0.3 * g.normal();
    for (auto& v : h.b_mu) v = 0.2 * g.normal();
    for (auto& v : h.b_xi) v = 0.2 * g.normal();
    return h;
}

vec random_vec(std::size_t n, rng& g, double scale = 1.0) {
    vec v(n);
    for (auto& x : v) x = scale * g.normal();
    return v;
}

double density_loss(const tap_head& h, const vec& a_prev, const vec& a) {
    const head_output out = head_forward(h, project(h, a_prev));
    switch (h.density) {
        case density_kind::diag_gauss: return surprisal_diag(a, out).nll_core;
        case density_kind::student_t: return surprisal_student_t(a, out, h.nu);
        case density_kind::huber: return surprisal_huber(a, out, h.delta);
        case density_kind::lowrank: break;
    }
    return 0.0;
}

// Dense quadratic form / determinant via in-test Gaussian elimination.
void dense_spd_solve(const tensor_d& c, const vec& v, double& quad, double& logdet) {
    const std::int64_t n = c.dim(0);
    tensor_d m = c;
    vec x = v;
    logdet = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double piv = m(i, i);
        logdet += std::log(piv);
        for (std::int64_t j = i + 1; j < n; ++j) {
            const double f = m(j, i) / piv;
            for (std::int64_t k = i; k < n; ++k) m(j, k) -= f * m(i, k);
            x[static_cast<std::size_t>(j)] -= f * x[static_cast<std::size_t>(i)];
        }
    }
    for (std::int64_t i = n - 1; i >= 0; --i) {
        double acc = x[static_cast<std::size_t>(i)];
        for (std::int64_t j = i + 1; j < n; ++j) acc -= m(i, j) * x[static_cast<std::size_t>(j)];
        x[static_cast<std::size_t>(i)] = acc / m(i, i);
    }
    quad = 0.0;
    for (std::int64_t i = 0; i < n; ++i) quad += v[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
}

}  // namespace

TEST_CASE("project applies the stored matrix") {
    tap_head h = init_head(2, 3, 4, 3, false, 1);
    for (auto& v : h.P.data) v = 0.0;
    for (std::int64_t i = 0; i < 3; ++i) h.P(i, i) = 1.0;
    const vec a = {1.5, -2.0, 0.25};
    REQUIRE(project(h, a) == a);

    rng g(2);
    for (auto& v : h.P.data) v = g.normal();
    const vec z = project(h, a);
    for (std::int64_t i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < 3; ++j) acc += h.P(i, j) * a[static_cast<std::size_t>(j)];
        REQUIRE_THAT(z[static_cast<std::size_t>(i)], Catch::Matchers::WithinAbs(acc, 1e-12));
    }
    REQUIRE_THROWS_AS(project(h, vec(5, 0.0)), std::invalid_argument);
}

TEST_CASE("head_forward variance follows softplus with floor") {
    tap_head h = init_head(2, 4, 3, 2, false, 3);
    const vec z = {0.7, -0.3};

    SECTION("zero xi weights give softplus(0) plus floor") {
        const head_output out = head_forward(h, z);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE_THAT(out.var[i], Catch::Matchers::WithinAbs(std::log(2.0) + 1e-8, 1e-12));
            REQUIRE(out.grad_open[i] == 1);
        }
    }

    SECTION("deep negative xi bottoms out at epsilon squared") {
        h.s_lo = std::log(1e-12);
        for (auto& v : h.b_xi) v = -40.0;
        const head_output out = head_forward(h, z);
        for (std::size_t i = 0; i < 3; ++i) REQUIRE_THAT(out.var[i], Catch::Matchers::WithinRel(1e-8, 1e-6));
    }

    SECTION("random weights match direct recomputation") {
        tap_head r = small_head(9);
        rng g(10);
        const vec zz = random_vec(2, g);
        const head_output out = head_forward(r, zz);
        for (std::size_t i = 0; i < 3; ++i) {
            double mu = r.b_mu[i], xi = r.b_xi[i];
            for (std::size_t j = 0; j < 2; ++j) {
                mu += r.w_mu(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) * zz[j];
                xi += r.w_xi(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) * zz[j];
            }
            const double var = stable_softplus(xi) + 1e-8;
            REQUIRE_THAT(out.mu[i], Catch::Matchers::WithinAbs(mu, 1e-12));
            REQUIRE_THAT(out.var[i], Catch::Matchers::WithinAbs(var, 1e-12));
            REQUIRE_THAT(out.s[i], Catch::Matchers::WithinAbs(std::log(var), 1e-12));
        }
    }

    SECTION("clamp and train clip close the variance gradient") {
        for (auto& v : h.b_xi) v = 300.0;
        const head_output hi = head_forward(h, z);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE_THAT(hi.s[i], Catch::Matchers::WithinAbs(std::log(1e2), 1e-12));
            REQUIRE(hi.grad_open[i] == 0);
        }
        for (auto& v : h.b_xi) v = 20.0;
        const head_output clipped = head_forward(h, z, 8.0);
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE_THAT(clipped.xi[i], Catch::Matchers::WithinAbs(8.0, 1e-12));
            REQUIRE(clipped.grad_open[i] == 0);
        }
    }
}

TEST_CASE("diagonal surprisal closed forms") {
    SECTION("zero residual") {
        const vec a = {1.0, -2.0, 0.5};
        const vec s = {0.3, -0.4, 0.9};
        const surprisal sp = surprisal_diag(a, a, s);
        REQUIRE(sp.e == 0.0);
        REQUIRE_THAT(sp.nll_core, Catch::Matchers::WithinAbs(0.5 * (0.3 - 0.4 + 0.9), 1e-15));
    }
    SECTION("unit residuals at unit variance") {
        const vec mu(4, 0.0), s(4, 0.0);
        const vec a(4, 1.0);
        const surprisal sp = surprisal_diag(a, mu, s);
        REQUIRE_THAT(sp.e, Catch::Matchers::WithinAbs(4.0, 1e-15));
        REQUIRE_THAT(sp.ebar, Catch::Matchers::WithinAbs(1.0, 1e-15));
        REQUIRE_THAT(sp.nll_core, Catch::Matchers::WithinAbs(2.0, 1e-15));
    }
    SECTION("nonfinite input is a numeric error") {
        const vec a = {std::numeric_limits<double>::infinity()};
        REQUIRE_THROWS_AS(surprisal_diag(a, vec{0.0}, vec{0.0}), numeric_error);
    }
}

TEST_CASE("surprisal plus constant equals the dense Gaussian log-density") {
    rng g(21);
    const std::size_t d = 16;
    const vec a = random_vec(d, g), mu = random_vec(d, g);
    vec s(d);
    for (auto& v : s) v = g.uniform(-1.5, 1.5);

    const surprisal sp = surprisal_diag(a, mu, s);
    REQUIRE_THAT(2.0 * sp.nll_core - sp.e - std::accumulate(s.begin(), s.end(), 0.0),
                 Catch::Matchers::WithinAbs(0.0, 1e-10));

    long double quad = 0.0L, logdet = 0.0L;
    for (std::size_t i = 0; i < d; ++i) {
        const long double var = std::exp(static_cast<long double>(s[i]));
        const long double v = static_cast<long double>(a[i]) - static_cast<long double>(mu[i]);
        quad += v * v / var;
        logdet += std::log(var);
    }
    const double dense_nll = static_cast<double>(0.5L * quad + 0.5L * logdet) + 0.5 * d * kLog2Pi;
    REQUIRE_THAT(full_nll_from_core(sp.nll_core, static_cast<std::int64_t>(d)),
                 Catch::Matchers::WithinAbs(dense_nll, 1e-10));
}

TEST_CASE("student-t surprisal closed forms and Gaussian limit") {
    SECTION("zero residual") {
        const vec a = {0.5, 1.0};
        const vec s = {0.2, -0.6};
        REQUIRE_THAT(surprisal_student_t(a, a, s, 4.0), Catch::Matchers::WithinAbs(0.5 * (0.2 - 0.6), 1e-15));
    }
    SECTION("unit standardized residual at nu=1") {
        const vec a = {2.0}, mu = {1.0}, s = {0.0};
        REQUIRE_THAT(surprisal_student_t(a, mu, s, 1.0), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
        const vec s2 = {0.8};
        const double sigma = std::exp(0.4);
        const vec a2 = {1.0 + sigma};
        REQUIRE_THAT(surprisal_student_t(a2, mu, s2, 1.0),
                     Catch::Matchers::WithinAbs(std::log(2.0) + 0.4, 1e-12));
    }
    SECTION("large nu approaches the Gaussian core") {
        rng g(31);
        const std::size_t d = 8;
        const vec a = random_vec(d, g), mu = random_vec(d, g);
        vec s(d);
        for (auto& v : s) v = g.uniform(-1.0, 1.0);
        const double t = surprisal_student_t(a, mu, s, 1e6);
        const double gauss = surprisal_diag(a, mu, s).nll_core;
        REQUIRE_THAT(t, Catch::Matchers::WithinAbs(gauss, 1e-3));
    }
    REQUIRE_THROWS_AS(surprisal_student_t(vec{1.0}, vec{0.0}, vec{0.0}, 0.0), std::invalid_argument);
}

TEST_CASE("huber surprisal covers both branches and reduces to Gaussian") {
    const vec mu = {0.0}, s = {0.0};
    REQUIRE_THAT(surprisal_huber(vec{0.5}, mu, s, 1.0), Catch::Matchers::WithinAbs(0.125, 1e-15));
    REQUIRE_THAT(surprisal_huber(vec{3.0}, mu, s, 1.0), Catch::Matchers::WithinAbs(2.5, 1e-15));

    rng g(41);
    const std::size_t d = 6;
    vec a(d), m2(d), s2(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        m2[i] = g.normal();
        a[i] = m2[i] + g.uniform(-0.9, 0.9);
    }
    const surprisal sp = surprisal_diag(a, m2, s2);
    REQUIRE(surprisal_huber(a, m2, s2, 1.0) == 0.5 * sp.e + 0.0);

    vec s3(d);
    for (auto& v : s3) v = g.uniform(-0.5, 0.5);
    vec a3(d);
    for (std::size_t i = 0; i < d; ++i) a3[i] = m2[i] + 0.5 * std::exp(0.5 * s3[i]) * g.uniform01();
    const surprisal sp3 = surprisal_diag(a3, m2, s3);
    REQUIRE_THAT(surprisal_huber(a3, m2, s3, 1.0), Catch::Matchers::WithinAbs(sp3.nll_core, 1e-12));
}

TEST_CASE("low-rank surprisal agrees with dense linear algebra") {
    rng g(51);
    const std::int64_t d = 4, k = 4;
    for (int rep = 0; rep < 200; ++rep) {
        vec a = random_vec(static_cast<std::size_t>(d), g), mu = random_vec(static_cast<std::size_t>(d), g);
        vec s(static_cast<std::size_t>(d));
        for (auto& v : s) v = g.uniform(-1.0, 1.0);
        tensor_d B({d, k});
        for (auto& v : B.data) v = g.normal();

        const lowrank_surprisal lr = surprisal_lowrank(a, mu, s, B);

        tensor_d cov({d, d});
        for (std::int64_t i = 0; i < d; ++i) {
            cov(i, i) = std::exp(s[static_cast<std::size_t>(i)]);
            for (std::int64_t j = 0; j < d; ++j)
                for (std::int64_t t = 0; t < k; ++t) cov(i, j) += B(i, t) * B(j, t);
        }
        vec v(static_cast<std::size_t>(d));
        for (std::int64_t i = 0; i < d; ++i)
            v[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(i)];
        double quad = 0.0, logdet = 0.0;
        dense_spd_solve(cov, v, quad, logdet);

        REQUIRE_THAT(lr.quad, Catch::Matchers::WithinAbs(quad, 1e-8));
        REQUIRE_THAT(lr.logdet, Catch::Matchers::WithinAbs(logdet, 1e-8));
        REQUIRE(lr.quad >= 0.0);
        REQUIRE(lr.quad <= surprisal_diag(a, mu, s).e + 1e-12);
    }
}

TEST_CASE("low-rank degenerate cases") {
    const std::int64_t d = 4;
    rng g(61);
    vec a = random_vec(static_cast<std::size_t>(d), g), mu = random_vec(static_cast<std::size_t>(d), g);
    vec s(static_cast<std::size_t>(d));
    for (auto& v : s) v = g.uniform(-0.5, 0.5);

    SECTION("zero factor reduces to the diagonal case") {
        tensor_d B({d, 2});
        const lowrank_surprisal lr = surprisal_lowrank(a, mu, s, B);
        const surprisal sp = surprisal_diag(a, mu, s);
        REQUIRE_THAT(lr.quad, Catch::Matchers::WithinAbs(sp.e, 1e-12));
        REQUIRE_THAT(lr.logdet,
                     Catch::Matchers::WithinAbs(std::accumulate(s.begin(), s.end(), 0.0), 1e-12));
    }

    SECTION("residual orthogonal to the factor keeps the diagonal quadratic") {
        tensor_d B({d, 2});
        B(0, 0) = 1.3;
        B(1, 1) = -0.7;
        B(0, 1) = 0.4;
        vec v = {0.0, 0.0, 1.7, -0.6};
        vec a2(mu);
        for (std::size_t i = 0; i < a2.size(); ++i) a2[i] += v[i];
        const lowrank_surprisal lr = surprisal_lowrank(a2, mu, s, B);
        REQUIRE(lr.quad == surprisal_diag(a2, mu, s).e);
    }
}

TEST_CASE("head gradients vanish at their stationary points") {
    tap_head h = small_head(71);
    rng g(72);
    const vec a_prev = random_vec(4, g);
    const head_output out = head_forward(h, project(h, a_prev));

    const head_grads at_mu = head_gradients(h, a_prev, out.mu, out);
    for (double v : at_mu.d_mu) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-15));

    vec unit(out.mu);
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] += std::sqrt(out.var[i]);
    const head_grads at_unit = head_gradients(h, a_prev, unit, out);
    for (double v : at_unit.d_xi) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("head gradients match finite differences for every density") {
    const double h_step = 1e-6;
    for (density_kind density : {density_kind::diag_gauss, density_kind::student_t, density_kind::huber}) {
        tap_head head = small_head(80 + static_cast<std::uint64_t>(density), density);
        rng g(90 + static_cast<std::uint64_t>(density));
        const vec a_prev = random_vec(4, g);
        const vec a = random_vec(3, g);

        const head_output out = head_forward(head, project(head, a_prev));
        const head_grads an = head_gradients(head, a_prev, a, out);

        std::vector<param_view> params;
        collect_params(head, params);
        std::vector<const double*> analytic = {an.g_p.data.data(), an.g_wmu.data.data(), an.g_bmu.data(),
                                               an.g_wxi.data.data(), an.g_bxi.data()};
        std::vector<std::size_t> sizes = {head.P.data.size(), head.w_mu.data.size(), head.b_mu.size(),
                                          head.w_xi.data.size(), head.b_xi.size()};

        double max_rel = 0.0;
        for (std::size_t b = 0; b < params.size(); ++b) {
            REQUIRE(params[b].n == sizes[b]);
            for (std::size_t i = 0; i < params[b].n; ++i) {
                double& p = params[b].p[i];
                const double saved = p;
                p = saved + h_step;
                const double up = density_loss(head, a_prev, a);
                p = saved - h_step;
                const double dn = density_loss(head, a_prev, a);
                p = saved;
                const double fd = (up - dn) / (2.0 * h_step);
                const double av = analytic[b][i];
                const double denom = std::max({std::abs(fd), std::abs(av), 1e-4});
                max_rel = std::max(max_rel, std::abs(fd - av) / denom);
            }
        }
        // Gradient on the projector input, checked the same way.
        vec ap = a_prev;
        for (std::size_t i = 0; i < ap.size(); ++i) {
            const double saved = ap[i];
            ap[i] = saved + h_step;
            const double up = density_loss(head, ap, a);
            ap[i] = saved - h_step;
            const double dn = density_loss(head, ap, a);
            ap[i] = saved;
            const double fd = (up - dn) / (2.0 * h_step);
            const double denom = std::max({std::abs(fd), std::abs(an.d_prev[i]), 1e-4});
            max_rel = std::max(max_rel, std::abs(fd - an.d_prev[i]) / denom);
        }
        INFO("density " << density_name(density));
        REQUIRE(max_rel <= 1e-5);
    }
}

TEST_CASE("clamped coordinates carry zero xi gradient") {
    tap_head h = small_head(101);
    for (auto& v : h.b_xi) v = 300.0;
    rng g(102);
    const vec a_prev = random_vec(4, g);
    const vec a = random_vec(3, g);
    const head_output out = head_forward(h, project(h, a_prev));
    const head_grads gr = head_gradients(h, a_prev, a, out);
    for (double v : gr.d_xi) REQUIRE(v == 0.0);
}

TEST_CASE("surprisal is invariant to per-coordinate affine rescaling") {
    rng g(111);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t d = 6;
        const vec a = random_vec(d, g), mu = random_vec(d, g);
        vec s(d);
        for (auto& v : s) v = g.uniform(-1.0, 1.0);

        vec a2(d), mu2(d), s2(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double scale = std::exp(g.uniform(-2.0, 2.0));
            const double shift = g.normal();
            a2[i] = scale * a[i] + shift;
            mu2[i] = scale * mu[i] + shift;
            s2[i] = s[i] + 2.0 * std::log(scale);
        }
        REQUIRE_THAT(surprisal_diag(a2, mu2, s2).e,
                     Catch::Matchers::WithinAbs(surprisal_diag(a, mu, s).e, 1e-9));
    }
}

TEST_CASE("model-generated data keeps ebar near one") {
    const std::int64_t d = 64;
    tap_head h = init_head(2, 16, d, 8, false, 121);
    rng g(122);
    for (auto& v : h.b_xi) v = 0.4 * g.normal();

    const int n = 10000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const vec a_prev = random_vec(16, g);
        const head_output out = head_forward(h, project(h, a_prev));
        vec a(out.mu);
        for (std::size_t j = 0; j < a.size(); ++j) a[j] += std::sqrt(out.var[j]) * g.normal();
        const double eb = surprisal_diag(a, out).ebar;
        const double delta = eb - mean;
        mean += delta / (i + 1);
        m2 += delta * (eb - mean);
    }
    const double var = m2 / (n - 1);
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(1.0, 0.1));
    const double ref = 2.0 / static_cast<double>(d);
    REQUIRE(var >= ref / 2.0);
    REQUIRE(var <= ref * 2.0);
}

TEST_CASE("density_ebar dispatches per density and normalizes by width") {
    rng g(131);
    const vec a_prev = random_vec(4, g);
    for (density_kind density : {density_kind::diag_gauss, density_kind::student_t, density_kind::huber}) {
        tap_head h = small_head(140 + static_cast<std::uint64_t>(density), density);
        const vec a = random_vec(3, g);
        const head_output out = head_forward(h, project(h, a_prev));
        const double eb = density_ebar(h, a, out);
        switch (density) {
            case density_kind::diag_gauss:
                REQUIRE_THAT(eb, Catch::Matchers::WithinAbs(surprisal_diag(a, out).ebar, 1e-14));
                break;
            case density_kind::student_t:
                REQUIRE_THAT(eb, Catch::Matchers::WithinAbs(surprisal_student_t(a, out, h.nu) / 3.0, 1e-14));
                break;
            case density_kind::huber:
                REQUIRE_THAT(eb, Catch::Matchers::WithinAbs(surprisal_huber(a, out, h.delta) / 3.0, 1e-14));
                break;
            case density_kind::lowrank: break;
        }
    }
}

TEST_CASE("density names round-trip and head validation rejects bad shapes") {
    for (density_kind k :
         {density_kind::diag_gauss, density_kind::student_t, density_kind::huber, density_kind::lowrank})
        REQUIRE(density_from_name(density_name(k)) == k);
    REQUIRE_THROWS_AS(density_from_name("gauss"), config_error);

    tap_head h = init_head(2, 4, 3, 2, false, 1);
    REQUIRE_NOTHROW(h.validate());
    h.b_mu.pop_back();
    REQUIRE_THROWS_AS(h.validate(), std::invalid_argument);

    tap_head lr = init_head(2, 4, 3, 2, false, 1, density_kind::lowrank);
    lr.B = tensor_d({3, 3});
    REQUIRE_THROWS_AS(lr.validate(), std::invalid_argument);
    lr.B = tensor_d({3, 1});
    REQUIRE_NOTHROW(lr.validate());
    REQUIRE_THROWS_AS(head_gradients(lr, vec(4, 0.0), vec(3, 0.0), head_forward(lr, vec(2, 0.0))),
                      std::invalid_argument);
}
