#pragma once

// Joint training of the classifier backbone and the per-tap heads. The loss
// is L_clf + lambda_ss * L_ss + lambda_reg * R with a warm-up ramp on
// lambda_ss, optional gradient detachment of the backbone from the auxiliary
// loss, optional adaptive rebalancing from the gradient-norm ratio, a global
// L2 gradient clip, and a train-time clip on the log-variance
// pre-activations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/error.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/nnet.hpp"
#include "snapuq/rng.hpp"

namespace snapuq {

enum class optimizer_kind { adam, sgd_momentum };

struct balance_config {
    bool adaptive = false;
    double rho_star = 0.1;
    double lambda_min = 1e-4;
    double lambda_max = 1e-2;
};

struct train_config {
    double lambda_ss = 5e-3;
    double lambda_reg = 1.0;
    double alpha_var = 1e-4;
    double alpha_wd = 5e-4;
    std::vector<double> omega;  // per-tap training weights, sum = tap count; empty -> uniform
    bool detach = false;
    int detach_patience = 0;  // >0: detach once the SS loss fails to improve this many epochs
    balance_config balance;
    optimizer_kind opt = optimizer_kind::adam;
    double lr = 1e-3;
    double lr_min = 0.0;
    int epochs = 30;
    int batch_size = 64;
    double warmup_frac = 0.1;
    double clip_norm = 1.0;
    double xi_clip = 8.0;
    double eta_g = 0.05;  // EMA rate for diagnostics
    std::uint64_t seed = 13;

    void validate(std::size_t n_taps) const {
        check_arg(lambda_ss >= 0.0, "train_config: lambda_ss must be nonnegative");
        check_arg(clip_norm > 0.0, "train_config: clip norm must be positive");
        check_arg(epochs >= 1 && batch_size >= 1, "train_config: epochs and batch size must be positive");
        check_arg(lr > 0.0, "train_config: lr must be positive");
        check_arg(omega.empty() || omega.size() == n_taps, "train_config: omega size mismatch");
        for (double o : omega) check_arg(o >= 0.0, "train_config: omega must be nonnegative");
        if (balance.adaptive) {
            check_arg(balance.lambda_min <= balance.lambda_max, "train_config: balance bounds out of order");
            check_arg(lambda_ss >= balance.lambda_min && lambda_ss <= balance.lambda_max,
                      "train_config: lambda_ss outside balance bounds");
        }
    }
};

inline train_config default_train_config(const backbone_spec& spec) {
    train_config cfg;
    cfg.opt = spec.kind == backbone_kind::mlp ? optimizer_kind::adam : optimizer_kind::sgd_momentum;
    cfg.lr = spec.kind == backbone_kind::mlp ? 1e-3 : 5e-2;
    return cfg;
}

struct train_log_entry {
    int epoch = 0;
    double loss_clf = 0.0;
    double loss_ss = 0.0;
    double reg = 0.0;
    double lambda_ss = 0.0;
    double rho_hat = 0.0;
    double lr = 0.0;
    bool detached = false;
    std::vector<double> ebar_mean;  // EMA per tap
    std::vector<double> ebar_var;   // EMA per tap
};

inline void to_json(nlohmann::json& j, const train_log_entry& e) {
    j = {{"epoch", e.epoch},     {"loss_clf", e.loss_clf}, {"loss_ss", e.loss_ss},
         {"reg", e.reg},         {"lambda_ss", e.lambda_ss}, {"rho_hat", e.rho_hat},
         {"lr", e.lr},           {"detached", e.detached},   {"ebar_mean", e.ebar_mean},
         {"ebar_var", e.ebar_var}};
}

// Density-specific per-sample surprisal core used by the auxiliary loss.
inline double density_core(const tap_head& head, const vec& a, const head_output& out) {
    switch (head.density) {
        case density_kind::diag_gauss: return surprisal_diag(a, out).nll_core;
        case density_kind::student_t: return surprisal_student_t(a, out, head.nu);
        case density_kind::huber: return surprisal_huber(a, out, head.delta);
        case density_kind::lowrank: {
            const lowrank_surprisal lr = surprisal_lowrank(a, out, head.B);
            return 0.5 * (lr.quad + lr.logdet);
        }
    }
    throw std::invalid_argument("density_core: bad density");
}

inline std::vector<double> effective_omega(const train_config& cfg, std::size_t n_taps) {
    if (!cfg.omega.empty()) return cfg.omega;
    return std::vector<double>(n_taps, 1.0);
}

// Batch mean of sum_l omega_l / d_l * core_l.
inline double ss_loss(const backbone& bb, const std::vector<tap_head>& heads, const std::vector<tensor_d>& xs,
                      const std::vector<double>& omega, double xi_clip = std::numeric_limits<double>::infinity()) {
    check_arg(!xs.empty(), "ss_loss: empty batch");
    check_arg(omega.size() == heads.size(), "ss_loss: omega size mismatch");
    double acc = 0.0;
    for (const tensor_d& x : xs) {
        const activation_trace tr = forward_collect(bb, x);
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const tap_head& h = heads[t];
            const vec z = project(h, tr.pooled[static_cast<std::size_t>(h.tap - 2)]);
            const head_output ho = head_forward(h, z, xi_clip);
            acc += omega[t] / static_cast<double>(h.dim()) *
                   density_core(h, tr.pooled[static_cast<std::size_t>(h.tap - 1)], ho);
        }
    }
    return acc / static_cast<double>(xs.size());
}

// R = alpha_var * mean over the batch of sum |s| + alpha_wd * sum of squared
// head weights (biases excluded). batch_outputs holds every head output for
// the batch; n_samples divides out the batch mean.
inline double regularizer(const std::vector<tap_head>& heads, const std::vector<head_output>& batch_outputs,
                          std::size_t n_samples, double alpha_var, double alpha_wd) {
    check_arg(n_samples >= 1, "regularizer: empty batch");
    double r_var = 0.0;
    for (const head_output& out : batch_outputs)
        for (double s : out.s) r_var += std::fabs(s);
    r_var /= static_cast<double>(n_samples);
    double r_wd = 0.0;
    for (const tap_head& h : heads) {
        for (double v : h.P.data) r_wd += v * v;
        for (double v : h.w_mu.data) r_wd += v * v;
        for (double v : h.w_xi.data) r_wd += v * v;
    }
    return alpha_var * r_var + alpha_wd * r_wd;
}

struct head_grad_buffers {
    tensor_d g_p, g_wmu, g_wxi;
    vec g_bmu, g_bxi;
};

inline head_grad_buffers zero_head_grads(const tap_head& h) {
    head_grad_buffers g;
    g.g_p = tensor_d(h.P.shape);
    g.g_wmu = tensor_d(h.w_mu.shape);
    g.g_wxi = tensor_d(h.w_xi.shape);
    g.g_bmu.assign(h.b_mu.size(), 0.0);
    g.g_bxi.assign(h.b_xi.size(), 0.0);
    return g;
}

struct step_diagnostics {
    double loss_clf = 0.0;
    double loss_ss = 0.0;
    double reg = 0.0;
    double total = 0.0;
    double grad_norm_clf = 0.0;
    double grad_norm_ss = 0.0;
    double grad_norm_post_clip = 0.0;
    std::vector<double> batch_ebar_mean;
    std::vector<double> batch_ebar_var;
};

struct gradient_bundle {
    backbone_grads bb;              // combined backbone gradient
    std::vector<head_grad_buffers> heads;
    step_diagnostics diag;
};

// Forward/backward over one batch. The SS gradient reaches the backbone
// through both the prediction target and the projector input unless detach
// is set, in which case the auxiliary loss trains only the heads.
inline gradient_bundle compute_gradients(const backbone& bb, const std::vector<tap_head>& heads,
                                         const train_config& cfg, double lambda_eff,
                                         const std::vector<tensor_d>& xs, const std::vector<int>& ys) {
    check_arg(!xs.empty() && xs.size() == ys.size(), "compute_gradients: bad batch");
    const std::size_t n = xs.size();
    const std::size_t nt = heads.size();
    const std::vector<double> omega = effective_omega(cfg, nt);
    const double invn = 1.0 / static_cast<double>(n);
    const bool want_ss = lambda_eff != 0.0 || cfg.lambda_reg * cfg.alpha_var != 0.0;

    gradient_bundle out;
    out.bb = zero_grads(bb);
    backbone_grads g_ss = zero_grads(bb);
    out.heads.reserve(nt);
    for (const tap_head& h : heads) out.heads.push_back(zero_head_grads(h));
    out.diag.batch_ebar_mean.assign(nt, 0.0);
    out.diag.batch_ebar_var.assign(nt, 0.0);

    const double av = cfg.lambda_reg * cfg.alpha_var;
    double r_var_acc = 0.0;
    std::vector<tensor_d> reg_wxi;
    std::vector<tensor_d> reg_p;
    std::vector<vec> reg_bxi;
    for (const tap_head& h : heads) {
        reg_wxi.emplace_back(h.w_xi.shape);
        reg_p.emplace_back(h.P.shape);
        reg_bxi.emplace_back(h.b_xi.size(), 0.0);
    }
    backbone_grads g_rb = zero_grads(bb);
    bool used_rb = false;
    std::vector<std::vector<double>> ebars(nt);
    for (std::size_t i = 0; i < n; ++i) {
        const activation_trace tr = forward_collect(bb, xs[i]);
        const int y = ys[i];
        check_arg(y >= 0 && y < bb.spec.classes, "compute_gradients: label out of range");
        out.diag.loss_clf += (stable_logsumexp(tr.logits) - tr.logits[static_cast<std::size_t>(y)]) * invn;
        vec dlogits = tr.post;
        dlogits[static_cast<std::size_t>(y)] -= 1.0;
        for (auto& v : dlogits) v *= invn;
        backward_collect(bb, xs[i], tr, dlogits, {}, out.bb);

        if (!want_ss) continue;
        std::vector<vec> inject(static_cast<std::size_t>(bb.spec.depth()));
        std::vector<vec> inject_reg(static_cast<std::size_t>(bb.spec.depth()));
        bool any_inject = false;
        bool any_reg_inject = false;
        for (std::size_t t = 0; t < nt; ++t) {
            const tap_head& h = heads[t];
            const vec& a_prev = tr.pooled[static_cast<std::size_t>(h.tap - 2)];
            const vec& a_cur = tr.pooled[static_cast<std::size_t>(h.tap - 1)];
            const vec z = project(h, a_prev);
            const head_output ho = head_forward(h, z, cfg.xi_clip);
            const double core = density_core(h, a_cur, ho);
            const double scale = omega[t] / static_cast<double>(h.dim());
            out.diag.loss_ss += scale * core * invn;
            ebars[t].push_back(surprisal_diag(a_cur, ho).ebar);
            for (double s : ho.s) r_var_acc += std::fabs(s) * invn;
            if (av != 0.0) {
                vec dxi(ho.s.size(), 0.0);
                bool any = false;
                for (std::size_t k = 0; k < ho.s.size(); ++k) {
                    if (!ho.grad_open[k] || ho.s[k] == 0.0) continue;
                    const double sign = ho.s[k] > 0.0 ? 1.0 : -1.0;
                    dxi[k] = av * invn * sign * sigmoid(ho.xi[k]) / ho.var[k];
                    any = true;
                }
                if (any) {
                    add_outer(reg_wxi[t], dxi, ho.z);
                    for (std::size_t k = 0; k < dxi.size(); ++k) reg_bxi[t][k] += dxi[k];
                    const vec dz = matvec_t(h.w_xi, dxi);
                    add_outer(reg_p[t], dz, a_prev);
                    if (!cfg.detach) {
                        auto& slot = inject_reg[static_cast<std::size_t>(h.tap - 2)];
                        if (slot.empty()) slot.assign(a_prev.size(), 0.0);
                        axpy(1.0, matvec_t(h.P, dz), slot);
                        any_reg_inject = true;
                    }
                }
            }

            head_grads hg = head_gradients(h, a_prev, a_cur, ho);
            const double gscale = scale * invn;
            for (std::size_t k = 0; k < hg.g_p.data.size(); ++k) out.heads[t].g_p.data[k] += gscale * hg.g_p.data[k];
            for (std::size_t k = 0; k < hg.g_wmu.data.size(); ++k)
                out.heads[t].g_wmu.data[k] += gscale * hg.g_wmu.data[k];
            for (std::size_t k = 0; k < hg.g_wxi.data.size(); ++k)
                out.heads[t].g_wxi.data[k] += gscale * hg.g_wxi.data[k];
            for (std::size_t k = 0; k < hg.g_bmu.size(); ++k) out.heads[t].g_bmu[k] += gscale * hg.g_bmu[k];
            for (std::size_t k = 0; k < hg.g_bxi.size(); ++k) out.heads[t].g_bxi[k] += gscale * hg.g_bxi[k];

            if (!cfg.detach) {
                auto& prev_slot = inject[static_cast<std::size_t>(h.tap - 2)];
                if (prev_slot.empty()) prev_slot.assign(a_prev.size(), 0.0);
                axpy(gscale, hg.d_prev, prev_slot);
                auto& cur_slot = inject[static_cast<std::size_t>(h.tap - 1)];
                if (cur_slot.empty()) cur_slot.assign(a_cur.size(), 0.0);
                axpy(gscale, hg.d_target, cur_slot);
                any_inject = true;
            }
        }
        if (any_inject) backward_collect(bb, xs[i], tr, vec(dlogits.size(), 0.0), inject, g_ss);
        if (any_reg_inject) {
            backward_collect(bb, xs[i], tr, vec(dlogits.size(), 0.0), inject_reg, g_rb);
            used_rb = true;
        }
    }

    for (std::size_t t = 0; t < nt; ++t) {
        if (ebars[t].empty()) continue;
        double mean = 0.0;
        for (double v : ebars[t]) mean += v;
        mean /= static_cast<double>(ebars[t].size());
        double var = 0.0;
        for (double v : ebars[t]) var += (v - mean) * (v - mean);
        var /= static_cast<double>(ebars[t].size());
        out.diag.batch_ebar_mean[t] = mean;
        out.diag.batch_ebar_var[t] = var;
    }

    // Regularizer value and gradients (mean-|s| term plus head weight decay).
    double r_wd = 0.0;
    for (const tap_head& h : heads) {
        for (double v : h.P.data) r_wd += v * v;
        for (double v : h.w_mu.data) r_wd += v * v;
        for (double v : h.w_xi.data) r_wd += v * v;
    }
    out.diag.reg = cfg.alpha_var * r_var_acc + cfg.alpha_wd * r_wd;

    // Gradient-norm diagnostics before mixing.
    {
        std::vector<param_view> views;
        backbone_grads& gc = out.bb;
        collect_grads(gc, views);
        double nc = 0.0;
        for (const auto& v : views)
            for (std::size_t k = 0; k < v.n; ++k) nc += v.p[k] * v.p[k];
        out.diag.grad_norm_clf = std::sqrt(nc);
        std::vector<param_view> sviews;
        collect_grads(g_ss, sviews);
        double ns = 0.0;
        for (const auto& v : sviews)
            for (std::size_t k = 0; k < v.n; ++k) ns += v.p[k] * v.p[k];
        for (const auto& hg : out.heads) {
            for (double v : hg.g_p.data) ns += v * v;
            for (double v : hg.g_wmu.data) ns += v * v;
            for (double v : hg.g_wxi.data) ns += v * v;
            for (double v : hg.g_bmu) ns += v * v;
            for (double v : hg.g_bxi) ns += v * v;
        }
        out.diag.grad_norm_ss = std::sqrt(ns);
    }

    // Combine: backbone <- clf + lambda * ss + scale-control path; heads <-
    // lambda * ss + reg.
    if (lambda_eff != 0.0) {
        std::vector<param_view> dst, src;
        collect_grads(out.bb, dst);
        collect_grads(g_ss, src);
        for (std::size_t v = 0; v < dst.size(); ++v)
            for (std::size_t k = 0; k < dst[v].n; ++k) dst[v].p[k] += lambda_eff * src[v].p[k];
    }
    if (used_rb) {
        std::vector<param_view> dst, src;
        collect_grads(out.bb, dst);
        collect_grads(g_rb, src);
        for (std::size_t v = 0; v < dst.size(); ++v)
            for (std::size_t k = 0; k < dst[v].n; ++k) dst[v].p[k] += src[v].p[k];
    }
    const double wd2 = 2.0 * cfg.lambda_reg * cfg.alpha_wd;
    for (std::size_t t = 0; t < nt; ++t) {
        const tap_head& h = heads[t];
        head_grad_buffers& g = out.heads[t];
        const double lm = lambda_eff;
        for (auto& v : g.g_p.data) v *= lm;
        for (auto& v : g.g_wmu.data) v *= lm;
        for (auto& v : g.g_wxi.data) v *= lm;
        for (auto& v : g.g_bmu) v *= lm;
        for (auto& v : g.g_bxi) v *= lm;
        if (wd2 != 0.0) {
            for (std::size_t k = 0; k < h.P.data.size(); ++k) g.g_p.data[k] += wd2 * h.P.data[k];
            for (std::size_t k = 0; k < h.w_mu.data.size(); ++k) g.g_wmu.data[k] += wd2 * h.w_mu.data[k];
            for (std::size_t k = 0; k < h.w_xi.data.size(); ++k) g.g_wxi.data[k] += wd2 * h.w_xi.data[k];
        }
        for (std::size_t k = 0; k < g.g_wxi.data.size(); ++k) g.g_wxi.data[k] += reg_wxi[t].data[k];
        for (std::size_t k = 0; k < g.g_p.data.size(); ++k) g.g_p.data[k] += reg_p[t].data[k];
        for (std::size_t k = 0; k < g.g_bxi.size(); ++k) g.g_bxi[k] += reg_bxi[t][k];
    }

    out.diag.total = out.diag.loss_clf + lambda_eff * out.diag.loss_ss + cfg.lambda_reg * out.diag.reg;
    return out;
}

struct optimizer_state {
    optimizer_kind kind = optimizer_kind::adam;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double momentum = 0.9;
    std::int64_t t = 0;
    std::vector<double> m, v;
};

inline optimizer_state init_optimizer(optimizer_kind kind, std::size_t n_params) {
    optimizer_state st;
    st.kind = kind;
    st.m.assign(n_params, 0.0);
    if (kind == optimizer_kind::adam) st.v.assign(n_params, 0.0);
    return st;
}

namespace detail {

inline void collect_all_params(backbone& bb, std::vector<tap_head>& heads, std::vector<param_view>& out) {
    collect_params(bb, out);
    for (tap_head& h : heads) collect_params(h, out);
}

inline void collect_all_grads(gradient_bundle& g, std::vector<param_view>& out) {
    collect_grads(g.bb, out);
    for (head_grad_buffers& h : g.heads) {
        out.push_back({h.g_p.data.data(), h.g_p.data.size()});
        out.push_back({h.g_wmu.data.data(), h.g_wmu.data.size()});
        out.push_back({h.g_bmu.data(), h.g_bmu.size()});
        out.push_back({h.g_wxi.data.data(), h.g_wxi.data.size()});
        out.push_back({h.g_bxi.data(), h.g_bxi.size()});
    }
}

}  // namespace detail

// One optimizer step over backbone + heads from an already-computed gradient
// bundle: global clip, then SGD-momentum or Adam.
inline double apply_update(backbone& bb, std::vector<tap_head>& heads, gradient_bundle& g, const train_config& cfg,
                           double lr, optimizer_state& opt) {
    std::vector<param_view> params, grads;
    detail::collect_all_params(bb, heads, params);
    detail::collect_all_grads(g, grads);
    check_arg(params.size() == grads.size(), "apply_update: param/grad registry mismatch");

    double norm2 = 0.0;
    for (const auto& v : grads)
        for (std::size_t k = 0; k < v.n; ++k) norm2 += v.p[k] * v.p[k];
    double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw numeric_error("apply_update: nonfinite gradient norm");
    if (norm > cfg.clip_norm) {
        const double f = cfg.clip_norm / norm;
        for (const auto& v : grads)
            for (std::size_t k = 0; k < v.n; ++k) v.p[k] *= f;
        norm = cfg.clip_norm;
    }
    g.diag.grad_norm_post_clip = norm;

    std::size_t total = 0;
    for (const auto& v : params) total += v.n;
    if (opt.m.size() != total) throw std::invalid_argument("apply_update: optimizer state size mismatch");

    opt.t += 1;
    std::size_t off = 0;
    if (opt.kind == optimizer_kind::sgd_momentum) {
        for (std::size_t v = 0; v < params.size(); ++v) {
            for (std::size_t k = 0; k < params[v].n; ++k) {
                double& mom = opt.m[off + k];
                mom = opt.momentum * mom + grads[v].p[k];
                params[v].p[k] -= lr * mom;
            }
            off += params[v].n;
        }
    } else {
        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
        for (std::size_t v = 0; v < params.size(); ++v) {
            for (std::size_t k = 0; k < params[v].n; ++k) {
                double& m1 = opt.m[off + k];
                double& m2 = opt.v[off + k];
                const double gg = grads[v].p[k];
                m1 = opt.beta1 * m1 + (1.0 - opt.beta1) * gg;
                m2 = opt.beta2 * m2 + (1.0 - opt.beta2) * gg * gg;
                params[v].p[k] -= lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + opt.eps);
            }
            off += params[v].n;
        }
    }
    return norm;
}

// Full step: gradients, nonfinite guard, clip, update.
inline step_diagnostics train_step(backbone& bb, std::vector<tap_head>& heads, const train_config& cfg,
                                   double lambda_eff, double lr, const std::vector<tensor_d>& xs,
                                   const std::vector<int>& ys, optimizer_state& opt) {
    gradient_bundle g = compute_gradients(bb, heads, cfg, lambda_eff, xs, ys);
    if (!std::isfinite(g.diag.total)) {
        std::ostringstream os;
        os << "train_step: nonfinite loss (clf=" << g.diag.loss_clf << " ss=" << g.diag.loss_ss
           << " reg=" << g.diag.reg << " lambda=" << lambda_eff << ")";
        throw numeric_error(os.str());
    }
    apply_update(bb, heads, g, cfg, lr, opt);
    return g.diag;
}

// Multiplicative rebalancing toward the target gradient-norm ratio.
inline double balance_lambda(double lambda, double rho_hat, const balance_config& b) {
    if (rho_hat <= 0.0) return lambda;
    return std::clamp(lambda * b.rho_star / rho_hat, b.lambda_min, b.lambda_max);
}

struct layer_weight_fit {
    std::vector<double> omega;  // sums to tap count
    std::vector<double> w;      // sums to 1
    bool uniform_fallback = false;
};

// Inverse-variance layer weights from dev-set normalized surprisals.
inline layer_weight_fit fit_layer_weights(const backbone& bb, const std::vector<tap_head>& heads,
                                          const std::vector<tensor_d>& dev_xs) {
    check_arg(dev_xs.size() >= 2, "fit_layer_weights: need at least two dev examples");
    const std::size_t nt = heads.size();
    std::vector<double> var(nt, 0.0);
    std::vector<double> mean(nt, 0.0);
    std::vector<std::vector<double>> eb(nt);
    for (const tensor_d& x : dev_xs) {
        const activation_trace tr = forward_collect(bb, x);
        for (std::size_t t = 0; t < nt; ++t) {
            const tap_head& h = heads[t];
            const vec z = project(h, tr.pooled[static_cast<std::size_t>(h.tap - 2)]);
            const head_output ho = head_forward(h, z);
            eb[t].push_back(surprisal_diag(tr.pooled[static_cast<std::size_t>(h.tap - 1)], ho).ebar);
        }
    }
    for (std::size_t t = 0; t < nt; ++t) {
        for (double v : eb[t]) mean[t] += v;
        mean[t] /= static_cast<double>(eb[t].size());
        for (double v : eb[t]) var[t] += (v - mean[t]) * (v - mean[t]);
        var[t] /= static_cast<double>(eb[t].size() - 1);
    }
    layer_weight_fit out;
    out.omega.assign(nt, 1.0);
    out.w.assign(nt, 1.0 / static_cast<double>(nt));
    for (std::size_t t = 0; t < nt; ++t) {
        if (!(var[t] > 0.0) || !std::isfinite(var[t])) {
            out.uniform_fallback = true;
            return out;
        }
    }
    double sum = 0.0;
    std::vector<double> inv(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        inv[t] = 1.0 / var[t];
        sum += inv[t];
    }
    for (std::size_t t = 0; t < nt; ++t) {
        out.w[t] = inv[t] / sum;
        out.omega[t] = out.w[t] * static_cast<double>(nt);
    }
    return out;
}

// Adam fit of a single head on explicit (input, target) activation pairs,
// used to train heads against fixed dynamics without a backbone.
inline double fit_head_on_pairs(tap_head& head, const std::vector<vec>& inputs, const std::vector<vec>& targets,
                                int epochs = 40, double lr = 1e-2, int batch_size = 64, std::uint64_t seed = 7,
                                double xi_clip = 8.0) {
    check_arg(inputs.size() == targets.size() && !inputs.empty(), "fit_head_on_pairs: bad pair set");
    std::vector<param_view> params;
    collect_params(head, params);
    std::size_t total = 0;
    for (const auto& v : params) total += v.n;
    optimizer_state opt = init_optimizer(optimizer_kind::adam, total);
    rng root(seed);
    const std::int64_t n = static_cast<std::int64_t>(inputs.size());
    const double inv_d = 1.0 / static_cast<double>(head.dim());
    double last_loss = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng ep = root.split(0x50414952ull + static_cast<std::uint64_t>(epoch));
        const std::vector<std::int64_t> perm = ep.permutation(n);
        double ep_loss = 0.0;
        int steps = 0;
        for (std::int64_t start = 0; start < n; start += batch_size) {
            const std::int64_t stop = std::min(n, start + batch_size);
            const double invb = 1.0 / static_cast<double>(stop - start);
            head_grad_buffers g = zero_head_grads(head);
            double loss = 0.0;
            for (std::int64_t i = start; i < stop; ++i) {
                const vec& ap = inputs[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
                const vec& at = targets[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
                const vec z = project(head, ap);
                const head_output ho = head_forward(head, z, xi_clip);
                loss += inv_d * invb * density_core(head, at, ho);
                head_grads hg = head_gradients(head, ap, at, ho);
                const double sc = inv_d * invb;
                for (std::size_t k = 0; k < hg.g_p.data.size(); ++k) g.g_p.data[k] += sc * hg.g_p.data[k];
                for (std::size_t k = 0; k < hg.g_wmu.data.size(); ++k) g.g_wmu.data[k] += sc * hg.g_wmu.data[k];
                for (std::size_t k = 0; k < hg.g_wxi.data.size(); ++k) g.g_wxi.data[k] += sc * hg.g_wxi.data[k];
                for (std::size_t k = 0; k < hg.g_bmu.size(); ++k) g.g_bmu[k] += sc * hg.g_bmu[k];
                for (std::size_t k = 0; k < hg.g_bxi.size(); ++k) g.g_bxi[k] += sc * hg.g_bxi[k];
            }
            if (!std::isfinite(loss)) throw numeric_error("fit_head_on_pairs: nonfinite loss");
            std::vector<param_view> grads;
            grads.push_back({g.g_p.data.data(), g.g_p.data.size()});
            grads.push_back({g.g_wmu.data.data(), g.g_wmu.data.size()});
            grads.push_back({g.g_bmu.data(), g.g_bmu.size()});
            grads.push_back({g.g_wxi.data.data(), g.g_wxi.data.size()});
            grads.push_back({g.g_bxi.data(), g.g_bxi.size()});
            opt.t += 1;
            const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
            const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
            std::size_t off = 0;
            for (std::size_t v = 0; v < params.size(); ++v) {
                for (std::size_t k = 0; k < params[v].n; ++k) {
                    double& m1 = opt.m[off + k];
                    double& m2 = opt.v[off + k];
                    const double gg = grads[v].p[k];
                    m1 = opt.beta1 * m1 + (1.0 - opt.beta1) * gg;
                    m2 = opt.beta2 * m2 + (1.0 - opt.beta2) * gg * gg;
                    params[v].p[k] -= lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + opt.eps);
                }
                off += params[v].n;
            }
            ep_loss += loss;
            ++steps;
        }
        last_loss = ep_loss / steps;
    }
    return last_loss;
}

struct train_result {
    std::vector<train_log_entry> log;
    double final_lambda = 0.0;
};

// Epoch loop with seeded shuffling, cosine schedule with linear warm-up,
// lambda ramp over the warm-up span, optional per-epoch rebalancing and the
// optional stall-triggered detach rule.
inline train_result train(backbone& bb, std::vector<tap_head>& heads, train_config cfg,
                          const std::vector<tensor_d>& xs, const std::vector<int>& ys) {
    cfg.validate(heads.size());
    check_arg(xs.size() == ys.size() && !xs.empty(), "train: bad training set");
    std::vector<param_view> params;
    detail::collect_all_params(bb, heads, params);
    std::size_t total = 0;
    for (const auto& v : params) total += v.n;
    optimizer_state opt = init_optimizer(cfg.opt, total);

    rng shuffle_root(cfg.seed);
    const int warm = std::max(1, static_cast<int>(std::lround(cfg.warmup_frac * cfg.epochs)));
    double lambda_base = cfg.lambda_ss;
    double rho_hat = 0.0;
    bool rho_init = false;
    std::vector<double> ema_mean(heads.size(), 0.0), ema_var(heads.size(), 0.0);
    bool ema_init = false;
    train_result out;
    double best_ss = std::numeric_limits<double>::infinity();
    int stall = 0;

    const std::int64_t n = static_cast<std::int64_t>(xs.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        if (epoch < warm) {
            lr = cfg.lr * static_cast<double>(epoch + 1) / static_cast<double>(warm);
        } else if (cfg.epochs > warm) {
            const double prog = static_cast<double>(epoch - warm) / static_cast<double>(cfg.epochs - warm);
            lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * prog));
        }
        const double ramp = std::min(1.0, static_cast<double>(epoch + 1) / static_cast<double>(warm));
        const double lambda_eff = lambda_base * ramp;

        rng ep_rng = shuffle_root.split(0x5EED0000ull + static_cast<std::uint64_t>(epoch));
        const std::vector<std::int64_t> perm = ep_rng.permutation(n);
        double ep_clf = 0.0, ep_ss = 0.0, ep_reg = 0.0;
        int steps = 0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const std::int64_t stop = std::min(n, start + cfg.batch_size);
            std::vector<tensor_d> bx;
            std::vector<int> by;
            bx.reserve(static_cast<std::size_t>(stop - start));
            for (std::int64_t i = start; i < stop; ++i) {
                bx.push_back(xs[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
                by.push_back(ys[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
            }
            const step_diagnostics d = train_step(bb, heads, cfg, lambda_eff, lr, bx, by, opt);
            ep_clf += d.loss_clf;
            ep_ss += d.loss_ss;
            ep_reg += d.reg;
            ++steps;
            const double rho = d.grad_norm_clf > 0.0 ? d.grad_norm_ss / d.grad_norm_clf : 0.0;
            if (!rho_init) {
                rho_hat = rho;
                rho_init = true;
            } else {
                rho_hat = (1.0 - cfg.eta_g) * rho_hat + cfg.eta_g * rho;
            }
            if (!ema_init) {
                ema_mean = d.batch_ebar_mean;
                ema_var = d.batch_ebar_var;
                ema_init = true;
            } else {
                for (std::size_t t = 0; t < heads.size(); ++t) {
                    ema_mean[t] = (1.0 - cfg.eta_g) * ema_mean[t] + cfg.eta_g * d.batch_ebar_mean[t];
                    ema_var[t] = (1.0 - cfg.eta_g) * ema_var[t] + cfg.eta_g * d.batch_ebar_var[t];
                }
            }
        }

        train_log_entry e;
        e.epoch = epoch;
        e.loss_clf = ep_clf / steps;
        e.loss_ss = ep_ss / steps;
        e.reg = ep_reg / steps;
        e.lambda_ss = lambda_eff;
        e.rho_hat = rho_hat;
        e.lr = lr;
        e.detached = cfg.detach;
        e.ebar_mean = ema_mean;
        e.ebar_var = ema_var;
        out.log.push_back(e);

        if (cfg.balance.adaptive && epoch >= warm) lambda_base = balance_lambda(lambda_base, rho_hat, cfg.balance);
        if (cfg.detach_patience > 0 && !cfg.detach) {
            if (e.loss_ss < best_ss - 1e-12) {
                best_ss = e.loss_ss;
                stall = 0;
            } else if (++stall >= cfg.detach_patience) {
                cfg.detach = true;
            }
        }
    }
    out.final_lambda = lambda_base;
    return out;
}

}  // namespace snapuq
