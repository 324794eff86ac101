#pragma once

// Evaluation metrics for scored streams: PR/ROC summaries, detection delay,
// risk-coverage, calibration, and percentile bootstrap intervals. All
// functions are pure; determinism comes from explicit seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "snapuq/error.hpp"
#include "snapuq/rng.hpp"

namespace snapuq {

struct event_interval {
    std::int64_t onset = 0;
    std::int64_t offset = 0;  // inclusive
};

namespace detail {

inline std::vector<std::size_t> order_desc(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

}  // namespace detail

// Area under precision-recall with stepwise-in-recall integration: sweep the
// unique scores as thresholds (predict positive at score >= threshold), then
// integrate the running max precision over recall steps. Optional per-frame
// weights give the event-weighted variant.
inline double frame_auprc(const std::vector<double>& scores, const std::vector<int>& labels,
                          const std::vector<double>& weights = {}) {
    check_arg(scores.size() == labels.size() && !scores.empty(), "frame_auprc: size mismatch");
    check_arg(weights.empty() || weights.size() == scores.size(), "frame_auprc: weight size mismatch");
    const double eps = 1e-12;
    double total_pos = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i]) total_pos += weights.empty() ? 1.0 : weights[i];
    if (total_pos <= 0.0) throw config_error("frame_auprc: no positive frames");

    const std::vector<std::size_t> idx = detail::order_desc(scores);
    std::vector<double> recalls, precisions;
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double thr = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == thr) {
            const double w = weights.empty() ? 1.0 : weights[idx[i]];
            if (labels[idx[i]])
                tp += w;
            else
                fp += w;
            ++i;
        }
        precisions.push_back(tp / (tp + fp + eps));
        recalls.push_back(tp / (total_pos + eps));
    }
    // Running max precision from the high-recall end, then stepwise sum.
    double run = 0.0;
    std::vector<double> interp(precisions.size());
    for (std::size_t k = precisions.size(); k-- > 0;) {
        run = std::max(run, precisions[k]);
        interp[k] = run;
    }
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t k = 0; k < recalls.size(); ++k) {
        ap += (recalls[k] - prev_r) * interp[k];
        prev_r = recalls[k];
    }
    return ap;
}

struct pr_row {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// Per-threshold PR points from the same sweep the AUPRC uses.
inline std::vector<pr_row> pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_arg(scores.size() == labels.size() && !scores.empty(), "pr_curve: size mismatch");
    const double eps = 1e-12;
    double total_pos = 0.0;
    for (int l : labels) total_pos += l ? 1.0 : 0.0;
    if (total_pos <= 0.0) throw config_error("pr_curve: no positive frames");
    const std::vector<std::size_t> idx = detail::order_desc(scores);
    std::vector<pr_row> rows;
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double thr = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == thr) {
            if (labels[idx[i]])
                tp += 1.0;
            else
                fp += 1.0;
            ++i;
        }
        rows.push_back({thr, tp / (tp + fp + eps), tp / (total_pos + eps)});
    }
    return rows;
}

struct roc_row {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

inline std::vector<roc_row> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_arg(scores.size() == labels.size() && !scores.empty(), "roc_curve: size mismatch");
    double np = 0.0, nn = 0.0;
    for (int l : labels) (l ? np : nn) += 1.0;
    if (np <= 0.0 || nn <= 0.0) throw config_error("roc_curve: both classes required");
    const std::vector<std::size_t> idx = detail::order_desc(scores);
    std::vector<roc_row> rows;
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double thr = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == thr) {
            if (labels[idx[i]])
                tp += 1.0;
            else
                fp += 1.0;
            ++i;
        }
        rows.push_back({thr, fp / nn, tp / np});
    }
    return rows;
}

// Frame weights for the event-weighted PR variant: each event's frames share
// one unit of mass, the background shares one unit, normalized to sum 1.
inline std::vector<double> event_weights(std::size_t n, const std::vector<event_interval>& events) {
    std::vector<double> w(n, 0.0);
    std::vector<bool> in_event(n, false);
    for (const event_interval& e : events)
        for (std::int64_t t = e.onset; t <= e.offset && t < static_cast<std::int64_t>(n); ++t)
            in_event[static_cast<std::size_t>(t)] = true;
    const double k = static_cast<double>(events.size());
    for (const event_interval& e : events) {
        const std::int64_t len = std::min<std::int64_t>(e.offset, static_cast<std::int64_t>(n) - 1) - e.onset + 1;
        if (len <= 0) continue;
        for (std::int64_t t = e.onset; t <= e.offset && t < static_cast<std::int64_t>(n); ++t)
            w[static_cast<std::size_t>(t)] = 1.0 / (k * static_cast<double>(len));
    }
    std::size_t n_bg = 0;
    for (std::size_t t = 0; t < n; ++t)
        if (!in_event[t]) ++n_bg;
    if (n_bg > 0 && k > 0)
        for (std::size_t t = 0; t < n; ++t)
            if (!in_event[t]) w[t] = 1.0 / (k * static_cast<double>(n_bg));
    double sum = 0.0;
    for (double v : w) sum += v;
    if (sum > 0.0)
        for (double& v : w) v /= sum;
    return w;
}

// Rank-sum AUROC with averaged ranks on ties; all-tied scores give exactly
// one half.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_arg(scores.size() == labels.size() && !scores.empty(), "auroc: size mismatch");
    std::size_t np = 0, nn = 0;
    for (int l : labels) (l ? np : nn) += 1;
    if (np == 0 || nn == 0) throw config_error("auroc: both classes required");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const double npos = static_cast<double>(np);
    return (rank_sum_pos - npos * (npos + 1.0) / 2.0) / (npos * static_cast<double>(nn));
}

struct delay_result {
    double median_delay = std::numeric_limits<double>::quiet_NaN();
    double miss_rate = 0.0;
    std::vector<double> per_event;  // NaN marks a miss
};

// First in-event crossing of the threshold; events with no crossing are
// misses (including end-of-stream censoring, since the event interval is
// already clipped to the stream).
inline delay_result delay_at_threshold(const std::vector<event_interval>& events, const std::vector<double>& scores,
                                       double tau) {
    delay_result out;
    std::vector<double> hits;
    for (const event_interval& e : events) {
        double d = std::numeric_limits<double>::quiet_NaN();
        for (std::int64_t t = e.onset; t <= e.offset && t < static_cast<std::int64_t>(scores.size()); ++t) {
            if (scores[static_cast<std::size_t>(t)] >= tau) {
                d = static_cast<double>(t - e.onset);
                break;
            }
        }
        out.per_event.push_back(d);
        if (std::isnan(d))
            out.miss_rate += 1.0;
        else
            hits.push_back(d);
    }
    if (!events.empty()) out.miss_rate /= static_cast<double>(events.size());
    if (!hits.empty()) {
        std::sort(hits.begin(), hits.end());
        const std::size_t n = hits.size();
        out.median_delay = n % 2 ? hits[n / 2] : 0.5 * (hits[n / 2 - 1] + hits[n / 2]);
    }
    return out;
}

struct rc_point {
    double target = 0.0;
    double tau = 0.0;
    double coverage = 0.0;
    double risk = 0.0;
    bool skipped = false;
};

struct rc_result {
    std::vector<rc_point> table;
    double aurc = 0.0;
    bool any_skipped = false;
};

inline std::vector<double> default_coverage_grid() {
    std::vector<double> g;
    for (int i = 0; i < 50; ++i) g.push_back(0.5 + 0.01 * i);
    return g;
}

// Accept when u < tau. For each target coverage the threshold is placed just
// above the matching order statistic, so realized coverage is the closest
// achievable value from above; AURC is the trapezoid over realized coverage.
inline rc_result risk_coverage(const std::vector<double>& u, const std::vector<int>& correct,
                               const std::vector<double>& grid = default_coverage_grid()) {
    check_arg(u.size() == correct.size() && !u.empty(), "risk_coverage: size mismatch");
    const std::size_t n = u.size();
    std::vector<double> sorted_u(u);
    std::sort(sorted_u.begin(), sorted_u.end());
    rc_result out;
    for (double c : grid) {
        rc_point p;
        p.target = c;
        std::size_t k = static_cast<std::size_t>(std::ceil(c * static_cast<double>(n) - 1e-12));
        k = std::min(k, n);
        if (k == 0) {
            p.skipped = true;
            out.any_skipped = true;
            out.table.push_back(p);
            continue;
        }
        double tau;
        if (k >= n)
            tau = std::nextafter(sorted_u.back(), std::numeric_limits<double>::infinity());
        else
            tau = std::nextafter(sorted_u[k - 1], std::numeric_limits<double>::infinity());
        std::size_t acc = 0, wrong = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (u[i] < tau) {
                ++acc;
                if (!correct[i]) ++wrong;
            }
        }
        if (acc == 0) {
            p.skipped = true;
            out.any_skipped = true;
            out.table.push_back(p);
            continue;
        }
        p.tau = tau;
        p.coverage = static_cast<double>(acc) / static_cast<double>(n);
        p.risk = static_cast<double>(wrong) / static_cast<double>(acc);
        out.table.push_back(p);
    }
    double area = 0.0, span = 0.0;
    const rc_point* prev = nullptr;
    for (const rc_point& p : out.table) {
        if (p.skipped) continue;
        if (prev && p.coverage > prev->coverage) {
            area += 0.5 * (p.risk + prev->risk) * (p.coverage - prev->coverage);
            span += p.coverage - prev->coverage;
        }
        prev = &p;
    }
    out.aurc = span > 0.0 ? area / span : (prev ? prev->risk : 0.0);
    return out;
}

// Mean negative log-likelihood over the accepted set (u < tau).
inline double selective_nll(const std::vector<std::vector<double>>& post, const std::vector<int>& labels,
                            const std::vector<double>& u, double tau) {
    check_arg(post.size() == labels.size() && post.size() == u.size() && !post.empty(),
              "selective_nll: size mismatch");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < post.size(); ++i) {
        if (u[i] >= tau) continue;
        const double p = post[i][static_cast<std::size_t>(labels[i])];
        acc += -std::log(std::max(p, 1e-12));
        ++n;
    }
    if (n == 0) throw config_error("selective_nll: empty acceptance set");
    return acc / static_cast<double>(n);
}

struct calib_result {
    double nll = 0.0;
    double brier = 0.0;
    double ece = 0.0;
};

// NLL, multiclass Brier, and adaptive equal-mass ECE on max-confidence with
// B index-split bins (empty bins skipped).
inline calib_result calib_metrics(const std::vector<std::vector<double>>& post, const std::vector<int>& labels,
                                  int bins = 15) {
    check_arg(post.size() == labels.size() && !post.empty(), "calib_metrics: size mismatch");
    check_arg(bins >= 1, "calib_metrics: bins must be positive");
    const std::size_t n = post.size();
    calib_result out;
    std::vector<double> conf(n);
    std::vector<int> hit(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>& p = post[i];
        const int y = labels[i];
        check_arg(y >= 0 && y < static_cast<int>(p.size()), "calib_metrics: label out of range");
        out.nll += -std::log(std::max(p[static_cast<std::size_t>(y)], 1e-12));
        double b = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) {
            const double e = c == static_cast<std::size_t>(y) ? 1.0 : 0.0;
            b += (p[c] - e) * (p[c] - e);
        }
        out.brier += b / static_cast<double>(p.size());
        std::size_t arg = 0;
        for (std::size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[arg]) arg = c;
        conf[i] = p[arg];
        hit[i] = arg == static_cast<std::size_t>(y) ? 1 : 0;
    }
    out.nll /= static_cast<double>(n);
    out.brier /= static_cast<double>(n);

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return conf[a] < conf[b]; });
    for (int b = 0; b < bins; ++b) {
        const std::size_t lo = n * static_cast<std::size_t>(b) / static_cast<std::size_t>(bins);
        const std::size_t hi = n * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(bins);
        if (hi <= lo) continue;
        double c = 0.0, a = 0.0;
        for (std::size_t k = lo; k < hi; ++k) {
            c += conf[idx[k]];
            a += hit[idx[k]];
        }
        const double m = static_cast<double>(hi - lo);
        out.ece += m / static_cast<double>(n) * std::fabs(a / m - c / m);
    }
    return out;
}

// False positive rate on a designated clean subset at the threshold matched
// to the requested recall on the positive frames.
inline double fpr_at_matched_recall(const std::vector<double>& scores, const std::vector<int>& labels,
                                    const std::vector<int>& clean_mask, double recall_target = 0.95) {
    check_arg(scores.size() == labels.size() && scores.size() == clean_mask.size(), "fpr_at_matched_recall: size mismatch");
    check_arg(recall_target > 0.0 && recall_target <= 1.0, "fpr_at_matched_recall: bad recall target");
    std::vector<double> pos_scores;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (labels[i]) pos_scores.push_back(scores[i]);
    if (pos_scores.empty()) throw config_error("fpr_at_matched_recall: no positives");
    std::sort(pos_scores.begin(), pos_scores.end(), std::greater<double>());
    const std::size_t need =
        std::min(pos_scores.size(),
                 static_cast<std::size_t>(std::ceil(recall_target * static_cast<double>(pos_scores.size()) - 1e-12)));
    const double tau = pos_scores[need - 1];
    std::size_t n_clean = 0, n_fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!clean_mask[i]) continue;
        ++n_clean;
        if (scores[i] >= tau) ++n_fp;
    }
    if (n_clean == 0) throw config_error("fpr_at_matched_recall: empty clean subset");
    return static_cast<double>(n_fp) / static_cast<double>(n_clean);
}

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size(), 0.0);
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
        i = j;
    }
    return ranks;
}

}  // namespace detail

// Spearman rank correlation with averaged ranks on ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    check_arg(x.size() == y.size() && x.size() >= 2, "spearman: need at least two pairs");
    const std::vector<double> rx = detail::average_ranks(x);
    const std::vector<double> ry = detail::average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) throw config_error("spearman: constant input");
    return sxy / std::sqrt(sxx * syy);
}

struct ci_result {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    bool widened = false;  // set when more than 10% of resamples were undefined
};

// Percentile bootstrap over n units. The callable receives resampled unit
// indices and may throw or return NaN when the metric is undefined on that
// resample; deterministic via one counter-based substream per resample.
inline ci_result bootstrap_ci(std::size_t n_units, const std::function<double(const std::vector<std::int64_t>&)>& fn,
                              int n_boot, std::uint64_t seed) {
    check_arg(n_units >= 1, "bootstrap_ci: no units");
    check_arg(n_boot >= 1, "bootstrap_ci: no resamples");
    std::vector<std::int64_t> identity(n_units);
    std::iota(identity.begin(), identity.end(), std::int64_t{0});
    ci_result out;
    out.point = fn(identity);

    rng root(seed);
    std::vector<double> vals;
    int undefined = 0;
    std::vector<std::int64_t> sample(n_units);
    for (int b = 0; b < n_boot; ++b) {
        rng sub = root.split(0xB007ull + static_cast<std::uint64_t>(b));
        for (std::size_t i = 0; i < n_units; ++i) sample[i] = sub.below(static_cast<std::int64_t>(n_units));
        double v;
        try {
            v = fn(sample);
        } catch (const std::exception&) {
            v = std::numeric_limits<double>::quiet_NaN();
        }
        if (std::isfinite(v))
            vals.push_back(v);
        else
            ++undefined;
    }
    if (undefined > n_boot / 10) out.widened = true;
    if (vals.empty()) {
        out.lo = out.hi = std::numeric_limits<double>::quiet_NaN();
        out.widened = true;
        return out;
    }
    std::sort(vals.begin(), vals.end());
    const auto pct = [&](double q) {
        const double x = q * static_cast<double>(vals.size() - 1);
        const std::size_t i = static_cast<std::size_t>(std::floor(x));
        const std::size_t j = std::min(i + 1, vals.size() - 1);
        const double f = x - static_cast<double>(i);
        return (1.0 - f) * vals[i] + f * vals[j];
    };
    out.lo = pct(0.025);
    out.hi = pct(0.975);
    return out;
}

}  // namespace snapuq
