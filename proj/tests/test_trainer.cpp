#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "catch_amalgamated.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/trainer.hpp"

using namespace snapuq;

namespace {

backbone_spec mlp_spec(std::int64_t in, std::vector<std::int64_t> hidden, std::int64_t classes,
                       std::vector<int> taps) {
    backbone_spec s;
    s.kind = backbone_kind::mlp;
    s.input_dim = in;
    s.hidden = std::move(hidden);
    s.classes = classes;
    s.taps = std::move(taps);
    return s;
}

tensor_d random_input(const backbone_spec& s, rng& g) {
    tensor_d x({s.input_dim});
    for (auto& v : x.data) v = g.normal();
    return x;
}

vec random_vec(std::size_t n, rng& g, double scale = 1.0) {
    vec v(n);
    for (auto& x : v) x = scale * g.normal();
    return v;
}

void make_blobs(const backbone_spec& s, std::size_t n, std::uint64_t seed, std::vector<tensor_d>& xs,
                std::vector<int>& ys) {
    rng g(seed);
    std::vector<vec> means(static_cast<std::size_t>(s.classes));
    for (auto& m : means) m = random_vec(static_cast<std::size_t>(s.input_dim), g, 2.0);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(g.below(s.classes));
        tensor_d x({s.input_dim});
        for (std::size_t k = 0; k < x.data.size(); ++k)
            x.data[k] = means[static_cast<std::size_t>(y)][k] + 0.6 * g.normal();
        xs.push_back(std::move(x));
        ys.push_back(y);
    }
}

struct exact_net {
    backbone bb;
    std::vector<tap_head> heads;
};

// 2-2-2 identity MLP whose single head reproduces the next layer at unit
// predicted variance; mu_shift moves the mean to leave a known residual.
exact_net make_exact(double mu_shift) {
    exact_net e;
    e.bb = init_backbone(mlp_spec(2, {2, 2}, 2, {2}), 1);
    for (auto& t : e.bb.w) std::fill(t.data.begin(), t.data.end(), 0.0);
    e.bb.w[0](0, 0) = e.bb.w[0](1, 1) = 1.0;
    e.bb.w[1](0, 0) = e.bb.w[1](1, 1) = 1.0;
    tap_head h = init_head(2, 2, 2, 2, false, 1);
    std::fill(h.P.data.begin(), h.P.data.end(), 0.0);
    h.P(0, 0) = h.P(1, 1) = 1.0;
    std::fill(h.w_mu.data.begin(), h.w_mu.data.end(), 0.0);
    h.w_mu(0, 0) = h.w_mu(1, 1) = 1.0;
    h.b_mu.assign(2, mu_shift);
    h.b_xi.assign(2, inv_softplus(1.0 - 1e-8));
    e.heads.push_back(std::move(h));
    return e;
}

std::vector<tap_head> perturbed_heads(const backbone_spec& s, std::uint64_t seed,
                                      density_kind second = density_kind::diag_gauss) {
    std::vector<tap_head> heads;
    for (std::size_t t = 0; t < s.taps.size(); ++t) {
        const int tap = s.taps[t];
        heads.push_back(init_head(tap, s.layer_width(tap - 1), s.layer_width(tap), 3, false,
                                  seed + t, t == 1 ? second : density_kind::diag_gauss));
    }
    rng g(seed ^ 0xA5A5);
    for (tap_head& h : heads) {
        for (auto& v : h.w_xi.data) v = 0.25 * g.normal();
        for (auto& v : h.b_mu) v = 0.2 * g.normal();
        for (auto& v : h.b_xi) v = 0.2 * g.normal();
    }
    return heads;
}

double grad_vector_norm(gradient_bundle& g) {
    std::vector<param_view> views;
    detail::collect_all_grads(g, views);
    double acc = 0.0;
    for (const auto& v : views)
        for (std::size_t k = 0; k < v.n; ++k) acc += v.p[k] * v.p[k];
    return std::sqrt(acc);
}

// Smallest |pre-activation| across samples and layers. Central differences
// are only trustworthy when every ReLU is well away from its kink.
double relu_margin(const backbone& bb, const std::vector<tensor_d>& xs) {
    double m = std::numeric_limits<double>::infinity();
    for (const tensor_d& x : xs) {
        vec a = x.data;
        for (std::size_t l = 0; l < bb.w.size(); ++l) {
            vec pre = matvec(bb.w[l], a);
            for (std::size_t i = 0; i < pre.size(); ++i) {
                pre[i] += bb.b[l][i];
                m = std::min(m, std::fabs(pre[i]));
            }
            a = pre;
            for (auto& v : a) v = std::max(0.0, v);
        }
    }
    return m;
}

}  // namespace

TEST_CASE("auxiliary loss vanishes when the head matches the next layer", "[trainer]") {
    exact_net e = make_exact(0.0);
    tensor_d x({2});
    x.data = {1.0, 1.0};
    REQUIRE_THAT(ss_loss(e.bb, e.heads, {x}, {1.0}), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("auxiliary loss is one half for unit residuals at unit variance", "[trainer]") {
    exact_net e = make_exact(-1.0);
    tensor_d x({2});
    x.data = {1.0, 1.0};
    REQUIRE_THAT(ss_loss(e.bb, e.heads, {x}, {1.0}), Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("auxiliary loss matches a direct recomputation", "[trainer]") {
    const backbone_spec s = mlp_spec(5, {6, 4, 4}, 3, {2, 3});
    const backbone bb = init_backbone(s, 21);
    std::vector<tap_head> heads = perturbed_heads(s, 31, density_kind::student_t);
    heads[1].nu = 3.0;
    rng g(77);
    std::vector<tensor_d> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_input(s, g));
    const std::vector<double> omega = {0.7, 1.3};

    double expect = 0.0;
    for (const tensor_d& x : xs) {
        const activation_trace tr = forward_collect(bb, x);
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const tap_head& h = heads[t];
            const vec& ap = tr.pooled[static_cast<std::size_t>(h.tap - 2)];
            const vec& a = tr.pooled[static_cast<std::size_t>(h.tap - 1)];
            const std::int64_t d = h.dim(), r = h.proj_rank();
            vec z(static_cast<std::size_t>(r), 0.0);
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < h.prev_dim(); ++j)
                    z[static_cast<std::size_t>(i)] += h.P(i, j) * ap[static_cast<std::size_t>(j)];
            double core = 0.0;
            for (std::int64_t i = 0; i < d; ++i) {
                double mu = h.b_mu[static_cast<std::size_t>(i)];
                double xi = h.b_xi[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < r; ++j) {
                    mu += h.w_mu(i, j) * z[static_cast<std::size_t>(j)];
                    xi += h.w_xi(i, j) * z[static_cast<std::size_t>(j)];
                }
                const double sv =
                    std::clamp(std::log(stable_softplus(xi) + h.epsilon * h.epsilon), h.s_lo, h.s_hi);
                const double var = std::exp(sv);
                const double v = a[static_cast<std::size_t>(i)] - mu;
                const double q = v * v / var;
                if (h.density == density_kind::student_t)
                    core += 0.5 * (h.nu + 1.0) * std::log1p(q / h.nu) + 0.5 * sv;
                else
                    core += 0.5 * (q + sv);
            }
            expect += omega[t] / static_cast<double>(d) * core;
        }
    }
    expect /= static_cast<double>(xs.size());
    REQUIRE_THAT(ss_loss(bb, heads, xs, omega), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("head regularizer combines mean log-variance magnitude and weight decay", "[trainer]") {
    tap_head h = init_head(2, 3, 2, 2, false, 5);
    std::fill(h.P.data.begin(), h.P.data.end(), 0.0);
    std::fill(h.w_mu.data.begin(), h.w_mu.data.end(), 0.0);
    std::vector<tap_head> heads = {h};

    head_output quiet;
    quiet.s = {0.0, 0.0};
    REQUIRE(regularizer(heads, {quiet}, 1, 1.0, 1.0) == 0.0);

    head_output loud;
    loud.s = {2.0};
    REQUIRE(regularizer(heads, {loud}, 1, 1.0, 0.0) == 2.0);
    loud.s = {-3.0};
    REQUIRE(regularizer(heads, {loud}, 1, 1.0, 0.0) == 3.0);

    head_output a, b;
    a.s = {1.0};
    b.s = {2.0};
    REQUIRE_THAT(regularizer(heads, {a, b}, 2, 1.0, 0.0), Catch::Matchers::WithinAbs(1.5, 1e-15));

    tap_head w = h;
    w.P.data = {1.0, 2.0, 0.0, 0.0, 0.0, 0.0};
    std::fill(w.w_mu.data.begin(), w.w_mu.data.end(), 0.0);
    w.w_mu.data[0] = 3.0;
    std::fill(w.w_xi.data.begin(), w.w_xi.data.end(), 0.0);
    w.w_xi.data[0] = 0.5;
    w.b_mu = {9.0, 9.0};
    w.b_xi = {9.0, 9.0};
    std::vector<tap_head> wheads = {w};
    REQUIRE_THAT(regularizer(wheads, {quiet}, 1, 0.0, 2.0), Catch::Matchers::WithinAbs(28.5, 1e-12));

    REQUIRE_THROWS_AS(regularizer(heads, {quiet}, 0, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("rebalancing tracks the target ratio and clamps to its range", "[trainer]") {
    balance_config b;
    REQUIRE(balance_lambda(5e-3, 0.1, b) == 5e-3);
    REQUIRE_THAT(balance_lambda(1e-2, 0.2, b), Catch::Matchers::WithinRel(5e-3, 1e-12));
    REQUIRE(balance_lambda(5e-3, 1e-9, b) == 1e-2);
    REQUIRE(balance_lambda(5e-3, 1e9, b) == 1e-4);
    REQUIRE(balance_lambda(7e-3, 0.0, b) == 7e-3);
    REQUIRE(balance_lambda(7e-3, -1.0, b) == 7e-3);
}

TEST_CASE("layer weights are inversely proportional to dev surprisal variance", "[trainer]") {
    const backbone_spec s = mlp_spec(6, {8, 8, 8}, 3, {2, 3});
    const backbone bb = init_backbone(s, 5);
    const std::vector<tap_head> heads = perturbed_heads(s, 11);
    rng g(9);
    std::vector<tensor_d> dev;
    for (int i = 0; i < 12; ++i) dev.push_back(random_input(s, g));

    std::vector<std::vector<double>> eb(heads.size());
    for (const tensor_d& x : dev) {
        const activation_trace tr = forward_collect(bb, x);
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const tap_head& h = heads[t];
            const head_output ho = head_forward(h, project(h, tr.pooled[static_cast<std::size_t>(h.tap - 2)]));
            eb[t].push_back(surprisal_diag(tr.pooled[static_cast<std::size_t>(h.tap - 1)], ho).ebar);
        }
    }
    vec inv(heads.size(), 0.0);
    double sum = 0.0;
    for (std::size_t t = 0; t < heads.size(); ++t) {
        double mean = 0.0;
        for (double v : eb[t]) mean += v;
        mean /= static_cast<double>(eb[t].size());
        double var = 0.0;
        for (double v : eb[t]) var += (v - mean) * (v - mean);
        var /= static_cast<double>(eb[t].size() - 1);
        inv[t] = 1.0 / var;
        sum += inv[t];
    }

    const layer_weight_fit fit = fit_layer_weights(bb, heads, dev);
    REQUIRE_FALSE(fit.uniform_fallback);
    double wsum = 0.0, osum = 0.0;
    for (std::size_t t = 0; t < heads.size(); ++t) {
        REQUIRE_THAT(fit.w[t], Catch::Matchers::WithinAbs(inv[t] / sum, 1e-12));
        REQUIRE_THAT(fit.omega[t], Catch::Matchers::WithinAbs(2.0 * fit.w[t], 1e-12));
        wsum += fit.w[t];
        osum += fit.omega[t];
    }
    REQUIRE_THAT(wsum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(osum, Catch::Matchers::WithinAbs(2.0, 1e-12));

    const std::vector<tensor_d> repeated(5, dev[0]);
    const layer_weight_fit flat = fit_layer_weights(bb, heads, repeated);
    REQUIRE(flat.uniform_fallback);
    for (std::size_t t = 0; t < heads.size(); ++t) {
        REQUIRE(flat.w[t] == 0.5);
        REQUIRE(flat.omega[t] == 1.0);
    }

    REQUIRE_THROWS_AS(fit_layer_weights(bb, heads, {dev[0]}), std::invalid_argument);
}

TEST_CASE("combined gradients match finite differences of the recorded objective", "[trainer]") {
    const backbone_spec s = mlp_spec(2, {3, 3, 2}, 2, {2, 3});
    backbone bb = init_backbone(s, 3);
    std::vector<tap_head> heads = perturbed_heads(s, 7);
    // Moderate log-variances keep the objective curvature low enough for a
    // central difference with a 1e-6 step.
    for (tap_head& h : heads) {
        for (auto& v : h.w_xi.data) v *= 0.3;
        for (auto& v : h.b_xi) v *= 0.3;
    }

    train_config cfg;
    cfg.lambda_reg = 1.3;
    cfg.alpha_var = 0.05;
    cfg.alpha_wd = 0.02;
    const double lambda = 0.7;

    rng g(16);
    std::vector<tensor_d> xs;
    for (int i = 0; i < 3; ++i) {
        tensor_d x = random_input(s, g);
        for (auto& v : x.data) v *= 0.5;
        xs.push_back(std::move(x));
    }
    const std::vector<int> ys = {0, 1, 0};
    REQUIRE(relu_margin(bb, xs) > 1e-2);

    gradient_bundle bundle = compute_gradients(bb, heads, cfg, lambda, xs, ys);
    std::vector<param_view> params, grads;
    detail::collect_all_params(bb, heads, params);
    detail::collect_all_grads(bundle, grads);
    REQUIRE(params.size() == grads.size());

    const double h = 1e-6;
    for (std::size_t v = 0; v < params.size(); ++v) {
        for (std::size_t k = 0; k < params[v].n; ++k) {
            const double saved = params[v].p[k];
            params[v].p[k] = saved + h;
            const double up = compute_gradients(bb, heads, cfg, lambda, xs, ys).diag.total;
            params[v].p[k] = saved - h;
            const double dn = compute_gradients(bb, heads, cfg, lambda, xs, ys).diag.total;
            params[v].p[k] = saved;
            const double fd = (up - dn) / (2.0 * h);
            const double got = grads[v].p[k];
            REQUIRE_THAT(got, Catch::Matchers::WithinAbs(fd, 1e-5 * std::max(1.0, std::fabs(fd))));
        }
    }
}

TEST_CASE("disabling the auxiliary objective leaves classifier training untouched", "[trainer]") {
    const backbone_spec s = mlp_spec(4, {4, 4}, 2, {2});
    std::vector<tensor_d> xs;
    std::vector<int> ys;
    make_blobs(s, 32, 71, xs, ys);

    train_config cfg = default_train_config(s);
    cfg.lambda_ss = 0.0;
    cfg.lambda_reg = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 4;

    backbone with_heads = init_backbone(s, 8);
    backbone without = init_backbone(s, 8);
    std::vector<tap_head> heads = {init_head(2, 4, 4, 2, false, 12)};
    const tap_head frozen = heads[0];
    std::vector<tap_head> none;

    train(with_heads, heads, cfg, xs, ys);
    train(without, none, cfg, xs, ys);

    for (std::size_t l = 0; l < with_heads.w.size(); ++l) {
        REQUIRE(with_heads.w[l].data == without.w[l].data);
        REQUIRE(with_heads.b[l] == without.b[l]);
    }
    REQUIRE(with_heads.cw.data == without.cw.data);
    REQUIRE(with_heads.cb == without.cb);

    REQUIRE(heads[0].P.data == frozen.P.data);
    REQUIRE(heads[0].w_mu.data == frozen.w_mu.data);
    REQUIRE(heads[0].w_xi.data == frozen.w_xi.data);
    REQUIRE(heads[0].b_mu == frozen.b_mu);
    REQUIRE(heads[0].b_xi == frozen.b_xi);
}

TEST_CASE("detach stops auxiliary gradients into the backbone but not the heads", "[trainer]") {
    const backbone_spec s = mlp_spec(4, {5, 5}, 3, {2});
    const backbone bb = init_backbone(s, 2);
    const std::vector<tap_head> heads = perturbed_heads(s, 6);
    rng g(3);
    std::vector<tensor_d> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(random_input(s, g));
    const std::vector<int> ys = {0, 2, 1, 1};

    train_config detached;
    detached.detach = true;
    gradient_bundle gd = compute_gradients(bb, heads, detached, 0.37, xs, ys);

    train_config plain;
    plain.alpha_var = 0.0;
    gradient_bundle gz = compute_gradients(bb, heads, plain, 0.0, xs, ys);

    for (std::size_t l = 0; l < gd.bb.w.size(); ++l) {
        REQUIRE(gd.bb.w[l].data == gz.bb.w[l].data);
        REQUIRE(gd.bb.b[l] == gz.bb.b[l]);
    }
    REQUIRE(gd.bb.cw.data == gz.bb.cw.data);
    REQUIRE(gd.bb.cb == gz.bb.cb);

    double head_mag = 0.0;
    for (double v : gd.heads[0].g_wmu.data) head_mag += std::fabs(v);
    for (double v : gd.heads[0].g_p.data) head_mag += std::fabs(v);
    REQUIRE(head_mag > 0.0);
}

TEST_CASE("gradient clipping bounds the applied step norm", "[trainer]") {
    const backbone_spec s = mlp_spec(3, {4, 4}, 2, {2});
    backbone bb = init_backbone(s, 17);
    std::vector<tap_head> heads = perturbed_heads(s, 19);
    rng g(23);
    std::vector<tensor_d> xs = {random_input(s, g), random_input(s, g)};
    const std::vector<int> ys = {0, 1};
    train_config cfg;

    SECTION("oversized gradients are rescaled to the clip norm") {
        gradient_bundle gb = compute_gradients(bb, heads, cfg, cfg.lambda_ss, xs, ys);
        std::vector<param_view> views;
        detail::collect_all_grads(gb, views);
        for (auto& v : views)
            for (std::size_t k = 0; k < v.n; ++k) v.p[k] *= 1e6;
        optimizer_state opt = init_optimizer(cfg.opt, 0);
        std::vector<param_view> pv;
        detail::collect_all_params(bb, heads, pv);
        std::size_t total = 0;
        for (const auto& v : pv) total += v.n;
        opt = init_optimizer(cfg.opt, total);
        const double norm = apply_update(bb, heads, gb, cfg, 1e-3, opt);
        REQUIRE(norm == cfg.clip_norm);
        REQUIRE(gb.diag.grad_norm_post_clip == cfg.clip_norm);
        REQUIRE_THAT(grad_vector_norm(gb), Catch::Matchers::WithinAbs(cfg.clip_norm, 1e-9));
    }

    SECTION("small gradients pass through unscaled") {
        gradient_bundle gb = compute_gradients(bb, heads, cfg, cfg.lambda_ss, xs, ys);
        std::vector<param_view> views;
        detail::collect_all_grads(gb, views);
        for (auto& v : views)
            for (std::size_t k = 0; k < v.n; ++k) v.p[k] *= 1e-6;
        const double before = grad_vector_norm(gb);
        REQUIRE(before < cfg.clip_norm);
        std::vector<param_view> pv;
        detail::collect_all_params(bb, heads, pv);
        std::size_t total = 0;
        for (const auto& v : pv) total += v.n;
        optimizer_state opt = init_optimizer(cfg.opt, total);
        const double norm = apply_update(bb, heads, gb, cfg, 1e-3, opt);
        REQUIRE(norm == before);
        REQUIRE(gb.diag.grad_norm_post_clip == before);
    }

    SECTION("a nonfinite gradient raises a numeric error") {
        gradient_bundle gb = compute_gradients(bb, heads, cfg, cfg.lambda_ss, xs, ys);
        gb.heads[0].g_bmu[0] = std::numeric_limits<double>::infinity();
        std::vector<param_view> pv;
        detail::collect_all_params(bb, heads, pv);
        std::size_t total = 0;
        for (const auto& v : pv) total += v.n;
        optimizer_state opt = init_optimizer(cfg.opt, total);
        REQUIRE_THROWS_AS(apply_update(bb, heads, gb, cfg, 1e-3, opt), numeric_error);
    }

    SECTION("momentum updates move parameters along the clipped gradient") {
        train_config wide = cfg;
        wide.clip_norm = 1e18;
        wide.opt = optimizer_kind::sgd_momentum;
        gradient_bundle gb = compute_gradients(bb, heads, wide, wide.lambda_ss, xs, ys);
        const std::vector<double> before = bb.w[0].data;
        const std::vector<double> gref = gb.bb.w[0].data;
        std::vector<param_view> pv;
        detail::collect_all_params(bb, heads, pv);
        std::size_t total = 0;
        for (const auto& v : pv) total += v.n;
        optimizer_state opt = init_optimizer(optimizer_kind::sgd_momentum, total);
        apply_update(bb, heads, gb, wide, 0.1, opt);
        for (std::size_t k = 0; k < before.size(); ++k)
            REQUIRE(bb.w[0].data[k] == before[k] - 0.1 * gref[k]);
    }
}

TEST_CASE("batch diagnostics report normalized surprisal statistics", "[trainer]") {
    const backbone_spec s = mlp_spec(5, {6, 6}, 3, {2});
    const backbone bb = init_backbone(s, 41);
    const std::vector<tap_head> heads = perturbed_heads(s, 43);
    rng g(47);
    std::vector<tensor_d> xs;
    std::vector<int> ys;
    for (int i = 0; i < 5; ++i) {
        xs.push_back(random_input(s, g));
        ys.push_back(i % 3);
    }
    train_config cfg;
    const gradient_bundle gb = compute_gradients(bb, heads, cfg, cfg.lambda_ss, xs, ys);

    std::vector<double> ebars;
    for (const tensor_d& x : xs) {
        const activation_trace tr = forward_collect(bb, x);
        const tap_head& h = heads[0];
        const head_output ho = head_forward(h, project(h, tr.pooled[0]), cfg.xi_clip);
        ebars.push_back(surprisal_diag(tr.pooled[1], ho).ebar);
    }
    double mean = 0.0;
    for (double v : ebars) mean += v;
    mean /= static_cast<double>(ebars.size());
    double var = 0.0;
    for (double v : ebars) var += (v - mean) * (v - mean);
    var /= static_cast<double>(ebars.size());

    REQUIRE_THAT(gb.diag.batch_ebar_mean[0], Catch::Matchers::WithinAbs(mean, 1e-12));
    REQUIRE_THAT(gb.diag.batch_ebar_var[0], Catch::Matchers::WithinAbs(var, 1e-12));
    REQUIRE(gb.diag.grad_norm_clf > 0.0);
    REQUIRE(gb.diag.grad_norm_ss > 0.0);
}

TEST_CASE("training reduces both objectives and logs one entry per epoch", "[trainer]") {
    const backbone_spec s = mlp_spec(6, {8, 8}, 3, {2});
    int improved = 0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        std::vector<tensor_d> xs;
        std::vector<int> ys;
        make_blobs(s, 96, 100 + seed, xs, ys);
        backbone bb = init_backbone(s, seed);
        std::vector<tap_head> heads = {init_head(2, 8, 8, 4, false, seed + 50)};
        train_config cfg = default_train_config(s);
        cfg.epochs = 9;
        cfg.batch_size = 32;
        cfg.seed = seed;
        const train_result r = train(bb, heads, cfg, xs, ys);

        REQUIRE(r.log.size() == 9);
        for (int e = 0; e < 9; ++e) REQUIRE(r.log[static_cast<std::size_t>(e)].epoch == e);
        REQUIRE(r.log.back().loss_clf < r.log.front().loss_clf);

        double first = 0.0, last = 0.0;
        for (int e = 0; e < 3; ++e) first += r.log[static_cast<std::size_t>(e)].loss_ss;
        for (int e = 6; e < 9; ++e) last += r.log[static_cast<std::size_t>(e)].loss_ss;
        if (last < first) ++improved;
    }
    REQUIRE(improved >= 2);
}

TEST_CASE("adaptive rebalancing keeps the auxiliary weight inside its bounds", "[trainer]") {
    const backbone_spec s = mlp_spec(6, {8, 8}, 3, {2});
    std::vector<tensor_d> xs;
    std::vector<int> ys;
    make_blobs(s, 64, 9, xs, ys);
    backbone bb = init_backbone(s, 31);
    std::vector<tap_head> heads = {init_head(2, 8, 8, 4, false, 33)};
    train_config cfg = default_train_config(s);
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.balance.adaptive = true;
    const train_result r = train(bb, heads, cfg, xs, ys);

    REQUIRE(r.final_lambda >= cfg.balance.lambda_min);
    REQUIRE(r.final_lambda <= cfg.balance.lambda_max);
    for (const train_log_entry& e : r.log) {
        REQUIRE(e.lambda_ss <= cfg.balance.lambda_max + 1e-15);
        REQUIRE(e.lambda_ss >= cfg.balance.lambda_min - 1e-15);
        REQUIRE(e.rho_hat >= 0.0);
    }
}

TEST_CASE("warm-up ramps the learning rate and the auxiliary weight together", "[trainer]") {
    const backbone_spec s = mlp_spec(4, {4, 4}, 2, {2});
    std::vector<tensor_d> xs;
    std::vector<int> ys;
    make_blobs(s, 8, 55, xs, ys);
    backbone bb = init_backbone(s, 57);
    std::vector<tap_head> heads = {init_head(2, 4, 4, 2, false, 59)};
    train_config cfg = default_train_config(s);
    cfg.epochs = 15;
    cfg.batch_size = 8;
    const train_result r = train(bb, heads, cfg, xs, ys);

    REQUIRE(r.log.size() == 15);
    REQUIRE_THAT(r.log[0].lr, Catch::Matchers::WithinAbs(0.5 * cfg.lr, 1e-15));
    REQUIRE_THAT(r.log[1].lr, Catch::Matchers::WithinAbs(cfg.lr, 1e-15));
    REQUIRE_THAT(r.log[2].lr, Catch::Matchers::WithinAbs(cfg.lr, 1e-15));
    for (std::size_t e = 2; e + 1 < r.log.size(); ++e) REQUIRE(r.log[e + 1].lr <= r.log[e].lr + 1e-18);
    REQUIRE(r.log.back().lr > 0.0);
    REQUIRE(r.log.back().lr < 0.05 * cfg.lr);

    REQUIRE_THAT(r.log[0].lambda_ss, Catch::Matchers::WithinAbs(0.5 * cfg.lambda_ss, 1e-15));
    for (std::size_t e = 1; e < r.log.size(); ++e)
        REQUIRE_THAT(r.log[e].lambda_ss, Catch::Matchers::WithinAbs(cfg.lambda_ss, 1e-15));
}

TEST_CASE("head fitting on fixed activation pairs reaches unit normalized surprisal", "[trainer]") {
    const std::int64_t p = 6, d = 5;
    rng g(81);
    tensor_d A({d, p});
    for (auto& v : A.data) v = 0.5 * g.normal();
    const vec bias = random_vec(static_cast<std::size_t>(d), g, 0.3);
    auto draw = [&](std::size_t n, std::vector<vec>& ins, std::vector<vec>& outs) {
        for (std::size_t i = 0; i < n; ++i) {
            const vec z = random_vec(static_cast<std::size_t>(p), g);
            vec a = matvec(A, z);
            for (std::size_t k = 0; k < a.size(); ++k) a[k] += bias[k] + 0.3 * g.normal();
            ins.push_back(z);
            outs.push_back(a);
        }
    };
    std::vector<vec> train_in, train_out, dev_in, dev_out;
    draw(400, train_in, train_out);
    draw(200, dev_in, dev_out);

    tap_head quick = init_head(2, p, d, p, false, 3);
    const double loss_one = fit_head_on_pairs(quick, train_in, train_out, 1);
    tap_head head = init_head(2, p, d, p, false, 3);
    const double loss_full = fit_head_on_pairs(head, train_in, train_out, 200);
    REQUIRE(loss_full < loss_one);

    double mean_ebar = 0.0;
    for (std::size_t i = 0; i < dev_in.size(); ++i) {
        const head_output ho = head_forward(head, project(head, dev_in[i]));
        mean_ebar += surprisal_diag(dev_out[i], ho).ebar;
    }
    mean_ebar /= static_cast<double>(dev_in.size());
    REQUIRE(mean_ebar > 0.8);
    REQUIRE(mean_ebar < 1.2);
}

TEST_CASE("trainer rejects malformed configurations and data", "[trainer]") {
    const backbone_spec s = mlp_spec(4, {4, 4}, 2, {2});
    backbone bb = init_backbone(s, 1);
    std::vector<tap_head> heads = {init_head(2, 4, 4, 2, false, 2)};

    train_config cfg;
    cfg.omega = {1.0, 1.0};
    REQUIRE_THROWS_AS(cfg.validate(1), std::invalid_argument);

    cfg = train_config();
    cfg.lambda_ss = 5e-2;
    cfg.balance.adaptive = true;
    REQUIRE_THROWS_AS(cfg.validate(1), std::invalid_argument);

    cfg = train_config();
    cfg.epochs = 0;
    REQUIRE_THROWS_AS(cfg.validate(1), std::invalid_argument);

    cfg = train_config();
    REQUIRE_THROWS_AS(train(bb, heads, cfg, {}, {}), std::invalid_argument);

    std::vector<tensor_d> xs;
    std::vector<int> ys;
    make_blobs(s, 4, 3, xs, ys);
    ys[0] = 5;
    REQUIRE_THROWS_AS(compute_gradients(bb, heads, cfg, cfg.lambda_ss, xs, ys), std::invalid_argument);

    bb.w[0].data[0] = std::numeric_limits<double>::quiet_NaN();
    ys[0] = 0;
    optimizer_state opt = init_optimizer(cfg.opt, 1);
    REQUIRE_THROWS_AS(train_step(bb, heads, cfg, cfg.lambda_ss, cfg.lr, xs, ys, opt), numeric_error);
}
