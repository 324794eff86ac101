#pragma once

// Offline fitting of the uncertainty mapping and its thresholds, plus the
// online budgeted abstention controller. Fitting is deterministic: the
// logistic problem is convex and always starts from zero, the isotonic fit
// is exact pool-adjacent-violators, and temperature search is a grid scan.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/error.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

enum class mapping_kind { logistic, isotonic };

struct mapping_params {
    mapping_kind kind = mapping_kind::logistic;
    // logistic
    double beta0 = 0.0, beta1 = 1.0, beta2 = 0.0;
    // isotonic
    std::vector<double> breakpoints;  // strictly ascending
    std::vector<double> values;       // nondecreasing, clipped to [1e-4, 1-1e-4]
    double gamma = 1.0;               // feature blend: psi = gamma*S + (1-gamma)*m
    double tau = 0.5;
    std::uint64_t dev_hash = 0;
    std::string fitted_date;
};

inline constexpr double mapping_clip_lo = 1e-4;
inline constexpr double mapping_clip_hi = 1.0 - 1e-4;

inline double eval_mapping(const mapping_params& mp, double S, double m) {
    if (mp.kind == mapping_kind::logistic) return sigmoid(mp.beta0 + mp.beta1 * S + mp.beta2 * m);
    check_arg(!mp.breakpoints.empty(), "eval_mapping: empty isotonic fit");
    const double psi = mp.gamma * S + (1.0 - mp.gamma) * m;
    // Right-continuous step function: value at the largest breakpoint <= psi.
    // Below the smallest breakpoint the first level applies.
    auto it = std::upper_bound(mp.breakpoints.begin(), mp.breakpoints.end(), psi);
    std::size_t idx = it == mp.breakpoints.begin() ? 0 : static_cast<std::size_t>(it - mp.breakpoints.begin()) - 1;
    return std::clamp(mp.values[idx], mapping_clip_lo, mapping_clip_hi);
}

inline void to_json(nlohmann::json& j, const mapping_params& mp) {
    j["kind"] = mp.kind == mapping_kind::logistic ? "logistic" : "isotonic";
    j["beta0"] = mp.beta0;
    j["beta1"] = mp.beta1;
    j["beta2"] = mp.beta2;
    j["breakpoints"] = mp.breakpoints;
    j["values"] = mp.values;
    j["gamma"] = mp.gamma;
    j["tau"] = mp.tau;
    j["dev_hash"] = mp.dev_hash;
    j["fitted_date"] = mp.fitted_date;
}

inline void from_json(const nlohmann::json& j, mapping_params& mp) {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "logistic") mp.kind = mapping_kind::logistic;
    else if (k == "isotonic") mp.kind = mapping_kind::isotonic;
    else throw artifact_error("mapping_params: unknown kind " + k);
    mp.beta0 = j.at("beta0").get<double>();
    mp.beta1 = j.at("beta1").get<double>();
    mp.beta2 = j.at("beta2").get<double>();
    mp.breakpoints = j.at("breakpoints").get<std::vector<double>>();
    mp.values = j.at("values").get<std::vector<double>>();
    mp.gamma = j.at("gamma").get<double>();
    mp.tau = j.at("tau").get<double>();
    mp.dev_hash = j.value("dev_hash", std::uint64_t{0});
    mp.fitted_date = j.value("fitted_date", std::string{});
}

inline const std::vector<double>& default_temperature_grid() {
    static const std::vector<double> g = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0};
    return g;
}

// Grid search for the softmax temperature with lowest mean NLL; ties pick
// the smaller temperature.
inline double fit_temperature(const std::vector<vec>& logits, const std::vector<int>& labels,
                              std::vector<double> grid = default_temperature_grid()) {
    check_arg(!logits.empty() && logits.size() == labels.size(), "fit_temperature: bad dev set");
    check_arg(!grid.empty(), "fit_temperature: empty grid");
    std::sort(grid.begin(), grid.end());
    double best_t = grid.front();
    double best_nll = std::numeric_limits<double>::infinity();
    for (double t : grid) {
        double nll = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            vec scaled = logits[i];
            for (auto& v : scaled) v /= t;
            nll += stable_logsumexp(scaled) - scaled[static_cast<std::size_t>(labels[i])];
        }
        nll /= static_cast<double>(logits.size());
        if (nll < best_nll) {
            best_nll = nll;
            best_t = t;
        }
    }
    return best_t;
}

struct logistic_fit {
    double beta0 = 0.0, beta1 = 0.0, beta2 = 0.0;
    bool converged = false;
    int iterations = 0;
    double loss = 0.0;  // weighted mean cross-entropy, without the L2 term
};

namespace detail {

// Solves the symmetric positive definite 3x3 system h x = g in place.
inline bool solve3(double h[3][3], const double g[3], double x[3]) {
    double l[3][3] = {};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j <= i; ++j) {
            double acc = h[i][j];
            for (int t = 0; t < j; ++t) acc -= l[i][t] * l[j][t];
            if (i == j) {
                if (acc <= 1e-300) return false;
                l[i][i] = std::sqrt(acc);
            } else {
                l[i][j] = acc / l[j][j];
            }
        }
    }
    double y[3];
    for (int i = 0; i < 3; ++i) {
        double acc = g[i];
        for (int j = 0; j < i; ++j) acc -= l[i][j] * y[j];
        y[i] = acc / l[i][i];
    }
    for (int i = 2; i >= 0; --i) {
        double acc = y[i];
        for (int j = i + 1; j < 3; ++j) acc -= l[j][i] * x[j];
        x[i] = acc / l[i][i];
    }
    return true;
}

}  // namespace detail

// Class-balanced logistic regression of the error label on (1, S, m) with a
// small L2 penalty on the slopes. Damped Newton from zero; Levenberg-style
// damping degrades towards gradient steps when the Hessian misbehaves.
// label_free forces beta2 = 0 so the mapping needs no posterior input.
inline logistic_fit fit_logistic(const std::vector<double>& S, const std::vector<double>& m,
                                 const std::vector<int>& err, bool label_free = false, double l2 = 1e-4,
                                 int max_iter = 200, double grad_tol = 1e-8) {
    check_arg(S.size() == m.size() && S.size() == err.size() && !S.empty(), "fit_logistic: bad dev set");
    const std::size_t n = S.size();
    std::size_t n_pos = 0;
    for (int e : err) n_pos += static_cast<std::size_t>(e != 0);
    if (n_pos == 0 || n_pos == n) throw config_error("fit_logistic: both error classes must be present");
    const double w_pos = static_cast<double>(n) / (2.0 * static_cast<double>(n_pos));
    const double w_neg = static_cast<double>(n) / (2.0 * static_cast<double>(n - n_pos));

    double beta[3] = {0.0, 0.0, 0.0};
    const double invn = 1.0 / static_cast<double>(n);
    auto eval = [&](const double b[3], double g[3], double h[3][3]) {
        double loss = 0.0;
        if (g) g[0] = g[1] = g[2] = 0.0;
        if (h)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) h[i][j] = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x[3] = {1.0, S[i], m[i]};
            const double y = err[i] ? 1.0 : 0.0;
            const double w = err[i] ? w_pos : w_neg;
            const double t = b[0] + b[1] * S[i] + b[2] * m[i];
            const double p = sigmoid(t);
            loss += w * (t > 0.0 ? t + std::log1p(std::exp(-t)) - y * t
                                 : std::log1p(std::exp(t)) - y * t) * invn;
            if (g) {
                const double r = w * (p - y) * invn;
                for (int c = 0; c < 3; ++c) g[c] += r * x[c];
            }
            if (h) {
                const double q = w * p * (1.0 - p) * invn;
                for (int r2 = 0; r2 < 3; ++r2)
                    for (int c = 0; c < 3; ++c) h[r2][c] += q * x[r2] * x[c];
            }
        }
        loss += 0.5 * l2 * (b[1] * b[1] + b[2] * b[2]);
        if (g) {
            g[1] += l2 * b[1];
            g[2] += l2 * b[2];
        }
        if (h) {
            h[1][1] += l2;
            h[2][2] += l2;
        }
        return loss;
    };

    logistic_fit out;
    double grad[3], hess[3][3];
    double loss = eval(beta, grad, hess);
    for (int it = 0; it < max_iter; ++it) {
        out.iterations = it + 1;
        if (label_free) grad[2] = 0.0;
        const double gnorm = std::sqrt(grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]);
        if (gnorm <= grad_tol) {
            out.converged = true;
            break;
        }
        double damp = 0.0;
        bool stepped = false;
        for (int attempt = 0; attempt < 12 && !stepped; ++attempt) {
            double hd[3][3];
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) hd[i][j] = hess[i][j] + (i == j ? damp : 0.0);
            if (label_free) {
                // Pin the third coordinate.
                hd[2][0] = hd[2][1] = hd[0][2] = hd[1][2] = 0.0;
                hd[2][2] = 1.0;
            }
            double step[3];
            if (detail::solve3(hd, grad, step)) {
                double cand[3] = {beta[0] - step[0], beta[1] - step[1], beta[2] - step[2]};
                if (label_free) cand[2] = 0.0;
                const double cand_loss = eval(cand, nullptr, nullptr);
                if (cand_loss <= loss + 1e-15) {
                    beta[0] = cand[0];
                    beta[1] = cand[1];
                    beta[2] = cand[2];
                    stepped = true;
                    break;
                }
            }
            damp = damp == 0.0 ? 1e-4 : damp * 10.0;
        }
        if (!stepped) {
            // Plain gradient fallback with a conservative rate.
            beta[0] -= 0.1 * grad[0];
            beta[1] -= 0.1 * grad[1];
            if (!label_free) beta[2] -= 0.1 * grad[2];
        }
        loss = eval(beta, grad, hess);
    }
    out.beta0 = beta[0];
    out.beta1 = beta[1];
    out.beta2 = label_free ? 0.0 : beta[2];
    {
        const double b[3] = {out.beta0, out.beta1, out.beta2};
        out.loss = eval(b, nullptr, nullptr) - 0.5 * l2 * (out.beta1 * out.beta1 + out.beta2 * out.beta2);
    }
    return out;
}

// Exact pool-adjacent-violators fit: returns the fitted (unclipped) value
// for every input point, in input order. Weights default to 1.
inline std::vector<double> pav_fit(const std::vector<double>& psi, const std::vector<double>& y,
                                   std::vector<double> w = {}) {
    check_arg(!psi.empty() && psi.size() == y.size(), "pav_fit: bad input");
    if (w.empty()) w.assign(psi.size(), 1.0);
    check_arg(w.size() == psi.size(), "pav_fit: weight size mismatch");
    const std::size_t n = psi.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return psi[a] < psi[b]; });

    // Equal psi values must map to one fitted value; pre-pool ties.
    struct block {
        double sw, swy;
        std::size_t lo, hi;  // range in sorted order, inclusive
        double mean() const { return swy / sw; }
    };
    std::vector<block> blocks;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        double sw = 0.0, swy = 0.0;
        while (j < n && psi[order[j]] == psi[order[i]]) {
            sw += w[order[j]];
            swy += w[order[j]] * y[order[j]];
            ++j;
        }
        blocks.push_back({sw, swy, i, j - 1});
        while (blocks.size() >= 2 && blocks[blocks.size() - 2].mean() > blocks.back().mean()) {
            block b = blocks.back();
            blocks.pop_back();
            blocks.back().sw += b.sw;
            blocks.back().swy += b.swy;
            blocks.back().hi = b.hi;
        }
        i = j;
    }
    std::vector<double> fitted(n, 0.0);
    for (const block& b : blocks)
        for (std::size_t k = b.lo; k <= b.hi; ++k) fitted[order[k]] = b.mean();
    return fitted;
}

// Wraps the PAV solution as a right-continuous step mapping over psi, with
// values clipped into the probability band.
inline mapping_params fit_isotonic_pav(const std::vector<double>& psi, const std::vector<int>& y,
                                       double gamma = 1.0) {
    check_arg(psi.size() == y.size() && !psi.empty(), "fit_isotonic_pav: bad input");
    std::vector<double> yd(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) yd[k] = y[k] ? 1.0 : 0.0;
    const std::vector<double> fitted = pav_fit(psi, yd);

    std::vector<std::size_t> order(psi.size());
    for (std::size_t k = 0; k < psi.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return psi[a] < psi[b]; });

    mapping_params mp;
    mp.kind = mapping_kind::isotonic;
    mp.gamma = gamma;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const double bp = psi[order[k]];
        const double val = std::clamp(fitted[order[k]], mapping_clip_lo, mapping_clip_hi);
        if (!mp.breakpoints.empty() && mp.breakpoints.back() == bp) continue;
        if (!mp.values.empty() && mp.values.back() == val) continue;  // merge equal-level runs
        mp.breakpoints.push_back(bp);
        mp.values.push_back(val);
    }
    return mp;
}

// Frame-wise F1-optimal alarm threshold over the unique score values;
// ties resolve to the larger threshold so alarms stay sparse.
inline double select_threshold_f1(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_arg(scores.size() == labels.size() && !scores.empty(), "select_threshold_f1: bad input");
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l != 0);
    if (n_pos == 0) throw config_error("select_threshold_f1: no positive frames in dev stream");
    std::vector<double> cand(scores);
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    double best_tau = cand.front();
    double best_f1 = -1.0;
    for (double tau : cand) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool pred = scores[i] >= tau;
            if (pred && labels[i]) ++tp;
            else if (pred) ++fp;
            else if (labels[i]) ++fn;
        }
        // 2tp / (2tp + fp + fn) is exact on small integer counts, so equal
        // scores produce bitwise-equal f1 and the tie rule below can fire.
        const double f1 = tp == 0 ? 0.0
                                  : 2.0 * static_cast<double>(tp) /
                                        static_cast<double>(2 * tp + fp + fn);
        if (f1 >= best_f1) {  // >= prefers the larger tau on ties (candidates ascend)
            best_f1 = f1;
            best_tau = tau;
        }
    }
    return best_tau;
}

// Smallest acceptance threshold whose coverage reaches the target from
// above; acceptance is U < tau strictly.
inline double select_threshold_coverage(const std::vector<double>& u, double kappa) {
    check_arg(!u.empty(), "select_threshold_coverage: empty input");
    check_arg(kappa > 0.0 && kappa <= 1.0, "select_threshold_coverage: kappa outside (0,1]");
    std::vector<double> s(u);
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    std::size_t want = static_cast<std::size_t>(std::ceil(kappa * static_cast<double>(n) - 1e-12));
    if (want == 0) want = 1;
    // Advance past ties so the acceptance count is realizable exactly.
    std::size_t k = want;
    while (k < n && s[k - 1] == s[k]) ++k;
    if (k >= n) return s.back() < 1.0 ? 1.0 : std::nextafter(s.back(), 2.0);
    return s[k];
}

struct budget_state {
    double b = 0.1;      // target abstention rate
    double eta = 0.01;   // EWMA rate
    double kappa = 0.05; // threshold step size
    double abar = 0.0;   // EWMA of abstain indicator
    double tau = 0.5;    // adaptive threshold

    void validate() const {
        check_arg(b > 0.0 && b < 1.0, "budget_state: b outside (0,1)");
        check_arg(eta > 0.0 && eta <= 1.0, "budget_state: eta outside (0,1]");
        check_arg(kappa > 0.0, "budget_state: kappa must be positive");
        check_arg(abar >= 0.0 && abar <= 1.0, "budget_state: abar outside [0,1]");
    }
};

struct budget_result {
    bool abstain_allowed = false;
    budget_state state;
};

// One controller step: indicator against the adaptive threshold, EWMA
// update, then the proportional threshold move, clipped into [0,1].
inline budget_result budget_step(const budget_state& st, double u) {
    st.validate();
    budget_result out;
    out.state = st;
    const bool a = u >= st.tau;
    out.abstain_allowed = a;
    out.state.abar = st.eta * (a ? 1.0 : 0.0) + (1.0 - st.eta) * st.abar;
    out.state.tau = std::clamp(st.tau + st.kappa * (out.state.abar - st.b), 0.0, 1.0);
    return out;
}

}  // namespace snapuq
