#pragma once

// Single-pass scoring: per-tap normalized surprisal, the aggregate score S,
// the confidence proxy m, the mapped uncertainty U, and the single-pass
// baseline scores. Every score is oriented so that larger means more
// uncertain; confidence-like quantities are negated or complemented here.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "snapuq/calibrate.hpp"
#include "snapuq/error.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/nnet.hpp"

namespace snapuq {

struct maha_stats {
    // Index order follows the tap list. mu: classes x d per tap; var: d per
    // tap (shared within-class diagonal variance).
    std::vector<tensor_d> mu;
    std::vector<vec> var;
    double shrinkage = 1e-4;
    bool fitted = false;
};

struct score_config {
    std::vector<double> w;  // per-tap scoring weights, nonnegative, sum 1
    double alpha = 0.5;
    mapping_params mapping;
    bool mapping_fitted = false;
    double temperature = 1.0;  // posterior temperature, fitted offline
    double t_energy = 1.0;
    maha_stats maha;

    void validate(std::size_t n_taps) const {
        check_arg(w.size() == n_taps, "score_config: weight count must match tap count");
        double sum = 0.0;
        for (double v : w) {
            check_arg(v >= 0.0, "score_config: weights must be nonnegative");
            sum += v;
        }
        check_arg(std::fabs(sum - 1.0) <= 1e-9, "score_config: weights must sum to 1");
        check_arg(alpha >= 0.0 && alpha <= 1.0, "score_config: alpha outside [0,1]");
    }
};

struct score_record {
    std::int64_t frame = 0;
    std::vector<double> ebar;
    double S = 0.0;
    double m = 0.0;
    double U = 0.0;
    int yhat = 0;
    double conf = 0.0;
    double margin = 0.0;
    double msp = 0.0;
    double entropy = 0.0;
    double energy = 0.0;
    std::optional<double> maha;
    vec post;
    bool abstain = false;
    bool overflow = false;
};

// S = sum_l w_l ebar_l over the tap list.
inline double snap_score(const std::vector<double>& ebars, const std::vector<double>& w) {
    check_arg(ebars.size() == w.size() && !ebars.empty(), "snap_score: weight/tap mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < ebars.size(); ++i) s += w[i] * ebars[i];
    return s;
}

// Per-tap normalized surprisals for one trace.
inline std::vector<double> tap_ebars(const std::vector<tap_head>& heads, const activation_trace& tr) {
    std::vector<double> out;
    out.reserve(heads.size());
    for (const tap_head& h : heads) {
        const std::size_t prev = static_cast<std::size_t>(h.tap - 2);
        const std::size_t cur = static_cast<std::size_t>(h.tap - 1);
        check_arg(cur < tr.pooled.size(), "tap_ebars: trace missing tap activation");
        const vec z = project(h, tr.pooled[prev]);
        const head_output ho = head_forward(h, z);
        out.push_back(density_ebar(h, tr.pooled[cur], ho));
    }
    return out;
}

struct confidence_result {
    double m = 0.0;
    double conf = 0.0;
    double margin = 0.0;
    int yhat = 0;
};

inline confidence_result confidence_proxy(const vec& post, double alpha) {
    check_arg(post.size() >= 2, "confidence_proxy: need at least two classes");
    check_arg(alpha >= 0.0 && alpha <= 1.0, "confidence_proxy: alpha outside [0,1]");
    confidence_result r;
    double p1 = -1.0, p2 = -1.0;
    for (std::size_t i = 0; i < post.size(); ++i) {
        if (post[i] > p1) {
            p2 = p1;
            p1 = post[i];
            r.yhat = static_cast<int>(i);
        } else if (post[i] > p2) {
            p2 = post[i];
        }
    }
    r.conf = p1;
    r.margin = p1 - p2;
    r.m = alpha * (1.0 - p1) + (1.0 - alpha) * (1.0 - r.margin);
    return r;
}

inline double map_uncertainty(const score_config& cfg, double S, double m) {
    if (!cfg.mapping_fitted) throw artifact_error("map_uncertainty: mapping has not been fitted");
    return eval_mapping(cfg.mapping, S, m);
}

struct decision {
    bool abstain = false;
    std::optional<budget_state> budget;
};

// Abstain iff U >= tau and, when a budget controller is attached, the
// controller also permits an abstention this frame.
inline decision decide(double u, double tau, const std::optional<budget_state>& budget = std::nullopt) {
    check_arg(tau >= 0.0 && tau <= 1.0, "decide: tau outside [0,1]");
    decision d;
    bool over = u >= tau;
    if (budget.has_value()) {
        const budget_result br = budget_step(*budget, u);
        d.budget = br.state;
        over = over && br.abstain_allowed;
    }
    d.abstain = over;
    return d;
}

inline double baseline_msp(const vec& post) {
    double mx = 0.0;
    for (double p : post) mx = std::max(mx, p);
    return 1.0 - mx;
}

inline double baseline_entropy(const vec& post) {
    double h = 0.0;
    for (double p : post)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

inline double baseline_energy(const vec& logits, double t_energy) {
    check_arg(t_energy > 0.0, "baseline_energy: temperature must be positive");
    vec scaled = logits;
    for (auto& v : scaled) v /= t_energy;
    return -stable_logsumexp(scaled);
}

// Min-over-classes diagonal Mahalanobis distance, width-normalized per tap
// and combined with the scoring weights.
inline double baseline_maha(const maha_stats& stats, const std::vector<tap_head>& heads,
                            const activation_trace& tr, const std::vector<double>& w) {
    if (!stats.fitted) throw artifact_error("baseline_maha: class statistics not fitted");
    check_arg(stats.mu.size() == heads.size() && stats.var.size() == heads.size(), "baseline_maha: stats shape");
    const std::int64_t classes = stats.mu.front().dim(0);
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < classes; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const vec& a = tr.pooled[static_cast<std::size_t>(heads[t].tap - 1)];
            const std::int64_t d = stats.mu[t].dim(1);
            check_arg(a.size() == static_cast<std::size_t>(d), "baseline_maha: activation width");
            double q = 0.0;
            for (std::int64_t i = 0; i < d; ++i) {
                const double v = a[static_cast<std::size_t>(i)] - stats.mu[t](c, i);
                q += v * v / (stats.var[t][static_cast<std::size_t>(i)] + stats.shrinkage);
            }
            acc += w[t] * q / static_cast<double>(d);
        }
        best = std::min(best, acc);
    }
    return best;
}

// Class means and shared within-class diagonal variance of the tap
// activations, estimated on ID training data.
inline maha_stats fit_mahalanobis(const backbone& bb, const std::vector<tap_head>& heads,
                                  const std::vector<tensor_d>& xs, const std::vector<int>& ys,
                                  double shrinkage = 1e-4) {
    check_arg(!xs.empty() && xs.size() == ys.size(), "fit_mahalanobis: bad training set");
    maha_stats st;
    st.shrinkage = shrinkage;
    const std::int64_t classes = bb.spec.classes;
    std::vector<std::vector<vec>> sums(heads.size());
    std::vector<std::vector<double>> counts(heads.size(), std::vector<double>(static_cast<std::size_t>(classes), 0.0));
    for (std::size_t t = 0; t < heads.size(); ++t)
        sums[t].assign(static_cast<std::size_t>(classes),
                       vec(static_cast<std::size_t>(bb.spec.layer_width(heads[t].tap)), 0.0));
    std::vector<std::vector<vec>> acts(heads.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const activation_trace tr = forward_collect(bb, xs[i]);
        const std::size_t c = static_cast<std::size_t>(ys[i]);
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const vec& a = tr.pooled[static_cast<std::size_t>(heads[t].tap - 1)];
            acts[t].push_back(a);
            counts[t][c] += 1.0;
            for (std::size_t j = 0; j < a.size(); ++j) sums[t][c][j] += a[j];
        }
    }
    for (std::size_t t = 0; t < heads.size(); ++t) {
        const std::int64_t d = static_cast<std::int64_t>(sums[t][0].size());
        tensor_d mu({classes, d});
        for (std::int64_t c = 0; c < classes; ++c) {
            const double n = std::max(1.0, counts[t][static_cast<std::size_t>(c)]);
            for (std::int64_t j = 0; j < d; ++j) mu(c, j) = sums[t][static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] / n;
        }
        vec var(static_cast<std::size_t>(d), 0.0);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const std::size_t c = static_cast<std::size_t>(ys[i]);
            for (std::int64_t j = 0; j < d; ++j) {
                const double v = acts[t][i][static_cast<std::size_t>(j)] - mu(static_cast<std::int64_t>(c), j);
                var[static_cast<std::size_t>(j)] += v * v;
            }
        }
        for (auto& v : var) v /= static_cast<double>(xs.size());
        st.mu.push_back(std::move(mu));
        st.var.push_back(std::move(var));
    }
    st.fitted = true;
    return st;
}

// Full per-frame record from a trace. Posteriors are temperature-scaled
// before any confidence-derived quantity is computed.
inline score_record score_trace(const std::vector<tap_head>& heads, const score_config& cfg,
                                const activation_trace& tr, bool with_maha = false) {
    cfg.validate(heads.size());
    score_record rec;
    vec scaled_logits = tr.logits;
    for (auto& v : scaled_logits) v /= cfg.temperature;
    rec.post = softmax(scaled_logits);
    rec.ebar = tap_ebars(heads, tr);
    rec.S = snap_score(rec.ebar, cfg.w);
    const confidence_result cr = confidence_proxy(rec.post, cfg.alpha);
    rec.m = cr.m;
    rec.conf = cr.conf;
    rec.margin = cr.margin;
    rec.yhat = cr.yhat;
    if (cfg.mapping_fitted) rec.U = map_uncertainty(cfg, rec.S, rec.m);
    rec.msp = baseline_msp(rec.post);
    rec.entropy = baseline_entropy(rec.post);
    rec.energy = baseline_energy(tr.logits, cfg.t_energy);
    if (with_maha) rec.maha = baseline_maha(cfg.maha, heads, tr, cfg.w);
    return rec;
}

}  // namespace snapuq
