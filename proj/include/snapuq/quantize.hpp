#pragma once

// Post-training int8 export of the tap heads and the integer scoring path.
// Weights are symmetric per-tensor int8. The runtime path is integer-only up
// to one final float scale: int8 matvecs with 32-bit accumulators, a Q31
// fixed-point requantizer, a 255-threshold table that turns the log-variance
// accumulator into a LUT index, a Q8.8 inverse-sigma LUT, and a saturating
// 64-bit sum of squared scaled residuals.

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "snapuq/error.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/nnet.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

struct quant_tensor {
    std::vector<std::int8_t> values;
    std::vector<std::int64_t> shape;
    double scale = 1.0;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

// Symmetric per-tensor int8 with round-to-nearest-even; all-zero input keeps
// scale 1.0 by convention.
inline quant_tensor quantize_tensor(const tensor_d& t) {
    quant_tensor q;
    q.shape = t.shape;
    double mx = 0.0;
    for (double v : t.data) {
        check_arg(std::isfinite(v), "quantize_tensor: nonfinite value");
        mx = std::max(mx, std::fabs(v));
    }
    q.scale = mx > 0.0 ? mx / 127.0 : 1.0;
    q.values.resize(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        const double r = std::nearbyint(t.data[i] / q.scale);
        q.values[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
    }
    return q;
}

inline tensor_d dequantize(const quant_tensor& q) {
    tensor_d t(q.shape);
    for (std::size_t i = 0; i < q.values.size(); ++i) t.data[i] = q.values[i] * q.scale;
    return t;
}

// Activation scale: max magnitude over a calibration set with 10% headroom.
inline double activation_scale(double max_abs) {
    return max_abs > 0.0 ? max_abs * 1.1 / 127.0 : 1.0;
}

inline std::vector<std::int8_t> quantize_activation(const vec& a, double scale) {
    check_arg(scale > 0.0, "quantize_activation: scale must be positive");
    std::vector<std::int8_t> q(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double r = std::nearbyint(a[i] / scale);
        q[i] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
    }
    return q;
}

struct sigma_lut {
    double lo = 0.0;
    double hi = 0.0;
    std::array<std::uint16_t, 256> entries{};
};

// entry_j = round(256 * exp(-s_j / 2)) on a uniform grid over [lo, hi].
inline sigma_lut build_lut(double lo, double hi) {
    check_arg(lo < hi, "build_lut: bounds out of order");
    sigma_lut lut;
    lut.lo = lo;
    lut.hi = hi;
    for (int j = 0; j < 256; ++j) {
        const double s = lo + j * (hi - lo) / 255.0;
        const double v = std::nearbyint(256.0 * std::exp(-0.5 * s));
        lut.entries[static_cast<std::size_t>(j)] =
            static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
    }
    return lut;
}

inline double lut_decode(const sigma_lut& lut, int j) { return lut.entries[static_cast<std::size_t>(j)] / 256.0; }

inline int lut_index(const sigma_lut& lut, double s) {
    const double t = (std::clamp(s, lut.lo, lut.hi) - lut.lo) * 255.0 / (lut.hi - lut.lo);
    return static_cast<int>(std::clamp(std::nearbyint(t), 0.0, 255.0));
}

// Q31 fixed-point multiplier: real ~= m * 2^(-shift) with m in [2^30, 2^31).
struct requant_mult {
    std::int32_t m = 0;
    int shift = 0;
};

inline requant_mult make_requant(double real) {
    check_arg(real > 0.0 && std::isfinite(real), "make_requant: factor must be positive and finite");
    int exp = 0;
    const double frac = std::frexp(real, &exp);
    std::int64_t m = static_cast<std::int64_t>(std::nearbyint(frac * 2147483648.0));
    if (m == 2147483648ll) {
        m = 1073741824ll;
        ++exp;
    }
    requant_mult r;
    r.m = static_cast<std::int32_t>(m);
    r.shift = 31 - exp;
    return r;
}

// x * m * 2^(-shift) with round-half-up on the right shift; saturates to the
// 32-bit range.
inline std::int32_t apply_requant(std::int64_t x, requant_mult r) {
    std::int64_t p = x * static_cast<std::int64_t>(r.m);
    if (r.shift > 0) {
        if (r.shift >= 63) return 0;
        p = (p + (std::int64_t{1} << (r.shift - 1))) >> r.shift;
    } else if (r.shift < 0) {
        const int k = -r.shift;
        if (k >= 32 || p > (std::numeric_limits<std::int64_t>::max() >> k) ||
            p < (std::numeric_limits<std::int64_t>::min() >> k))
            return p > 0 ? std::numeric_limits<std::int32_t>::max() : std::numeric_limits<std::int32_t>::min();
        p <<= k;
    }
    p = std::clamp<std::int64_t>(p, std::numeric_limits<std::int32_t>::min(), std::numeric_limits<std::int32_t>::max());
    return static_cast<std::int32_t>(p);
}

struct quant_head {
    int tap = 0;
    std::int64_t dim = 0;
    std::int64_t prev_dim = 0;
    std::int64_t rank = 0;
    quant_tensor P, w_mu, w_xi;
    double s_in = 1.0;  // a_{l-1} scale
    double s_t = 1.0;   // a_l scale
    double s_z = 1.0;   // projected-feature scale
    std::vector<std::int32_t> b_mu_q;  // folded to s_wmu * s_z units
    std::vector<std::int32_t> b_xi_q;  // folded to s_wxi * s_z units
    requant_mult m_z;                  // z accumulator -> s_z units
    requant_mult m_mu;                 // mu accumulator -> residual units
    std::vector<std::int32_t> xi_thresholds;  // 255 ascending cut points on the xi accumulator
    double final_scale = 0.0;                 // (s_t/65536)^2 / d
};

namespace detail {

inline std::int32_t saturating_acc(std::int64_t v, bool& overflow) {
    if (v > std::numeric_limits<std::int32_t>::max()) {
        overflow = true;
        return std::numeric_limits<std::int32_t>::max();
    }
    if (v < std::numeric_limits<std::int32_t>::min()) {
        overflow = true;
        return std::numeric_limits<std::int32_t>::min();
    }
    return static_cast<std::int32_t>(v);
}

}  // namespace detail

// Export one head. The max_abs_* arguments are calibration maxima for the tap
// input, the tap target, and the projected feature.
inline quant_head quantize_head(const tap_head& h, double max_abs_prev, double max_abs_cur, double max_abs_z,
                                const sigma_lut& lut) {
    quant_head q;
    q.tap = h.tap;
    q.dim = h.dim();
    q.prev_dim = h.prev_dim();
    q.rank = h.proj_rank();
    q.P = quantize_tensor(h.P);
    q.w_mu = quantize_tensor(h.w_mu);
    q.w_xi = quantize_tensor(h.w_xi);
    q.s_in = activation_scale(max_abs_prev);
    q.s_t = activation_scale(max_abs_cur);
    q.s_z = activation_scale(max_abs_z);

    q.m_z = make_requant(q.P.scale * q.s_in / q.s_z);
    const double s_r = q.s_t / 256.0;  // shared residual scale
    q.m_mu = make_requant(q.w_mu.scale * q.s_z / s_r);
    q.b_mu_q.resize(h.b_mu.size());
    q.b_xi_q.resize(h.b_xi.size());
    const double mu_unit = q.w_mu.scale * q.s_z;
    const double xi_unit = q.w_xi.scale * q.s_z;
    for (std::size_t k = 0; k < h.b_mu.size(); ++k)
        q.b_mu_q[k] = static_cast<std::int32_t>(std::clamp(
            std::nearbyint(h.b_mu[k] / mu_unit), -2147483648.0, 2147483647.0));
    for (std::size_t k = 0; k < h.b_xi.size(); ++k)
        q.b_xi_q[k] = static_cast<std::int32_t>(std::clamp(
            std::nearbyint(h.b_xi[k] / xi_unit), -2147483648.0, 2147483647.0));

    // Cut points: for each target index j, the smallest accumulator value
    // whose log-variance lands on grid index >= j. The runtime index is then
    // a pure integer count of thresholds at or below the accumulator.
    const auto idx_of = [&](std::int64_t acc) {
        const double xi = static_cast<double>(acc) * xi_unit;
        const double var = stable_softplus(xi) + h.epsilon * h.epsilon;
        const double s = std::clamp(std::log(var), h.s_lo, h.s_hi);
        return lut_index(lut, s);
    };
    q.xi_thresholds.resize(255);
    for (int j = 1; j <= 255; ++j) {
        std::int64_t lo = std::numeric_limits<std::int32_t>::min();
        std::int64_t hi = static_cast<std::int64_t>(std::numeric_limits<std::int32_t>::max()) + 1;
        while (lo < hi) {
            const std::int64_t mid = lo + (hi - lo) / 2;
            if (idx_of(mid) >= j)
                hi = mid;
            else
                lo = mid + 1;
        }
        q.xi_thresholds[static_cast<std::size_t>(j - 1)] =
            lo > std::numeric_limits<std::int32_t>::max()
                ? std::numeric_limits<std::int32_t>::max()
                : static_cast<std::int32_t>(lo);
    }
    q.final_scale = (s_r / 256.0) * (s_r / 256.0) / static_cast<double>(q.dim);
    return q;
}

struct quant_score {
    double ebar = 0.0;
    bool overflow = false;
};

// Integer scoring path. a_prev_q and a_q are int8 activations in the s_in and
// s_t scales stored with the head.
inline quant_score quantized_ebar(const std::vector<std::int8_t>& a_prev_q, const std::vector<std::int8_t>& a_q,
                                  const quant_head& h, const sigma_lut& lut) {
    check_arg(static_cast<std::int64_t>(a_prev_q.size()) == h.prev_dim, "quantized_ebar: input size mismatch");
    check_arg(static_cast<std::int64_t>(a_q.size()) == h.dim, "quantized_ebar: target size mismatch");
    quant_score out;

    std::vector<std::int32_t> z_q(static_cast<std::size_t>(h.rank));
    for (std::int64_t i = 0; i < h.rank; ++i) {
        std::int64_t acc = 0;
        const std::int8_t* row = h.P.values.data() + i * h.prev_dim;
        for (std::int64_t k = 0; k < h.prev_dim; ++k)
            acc += static_cast<std::int64_t>(row[k]) * a_prev_q[static_cast<std::size_t>(k)];
        const std::int32_t acc32 = detail::saturating_acc(acc, out.overflow);
        const std::int32_t zi = apply_requant(acc32, h.m_z);
        z_q[static_cast<std::size_t>(i)] = std::clamp<std::int32_t>(zi, -127, 127);
    }

    const std::int64_t sat = 3037000499ll;  // floor(sqrt(2^63 - 1))
    std::int64_t total = 0;
    bool total_overflow = false;
    for (std::int64_t k = 0; k < h.dim; ++k) {
        std::int64_t mu_acc = h.b_mu_q[static_cast<std::size_t>(k)];
        std::int64_t xi_acc = h.b_xi_q[static_cast<std::size_t>(k)];
        const std::int8_t* wm = h.w_mu.values.data() + k * h.rank;
        const std::int8_t* wx = h.w_xi.values.data() + k * h.rank;
        for (std::int64_t i = 0; i < h.rank; ++i) {
            mu_acc += static_cast<std::int64_t>(wm[i]) * z_q[static_cast<std::size_t>(i)];
            xi_acc += static_cast<std::int64_t>(wx[i]) * z_q[static_cast<std::size_t>(i)];
        }
        const std::int32_t mu32 = detail::saturating_acc(mu_acc, out.overflow);
        const std::int32_t xi32 = detail::saturating_acc(xi_acc, out.overflow);

        const std::int32_t mu_fp = apply_requant(mu32, h.m_mu);
        const std::int64_t r_fp =
            (static_cast<std::int64_t>(a_q[static_cast<std::size_t>(k)]) << 8) - static_cast<std::int64_t>(mu_fp);

        const auto it = std::upper_bound(h.xi_thresholds.begin(), h.xi_thresholds.end(), xi32);
        const std::size_t j = static_cast<std::size_t>(it - h.xi_thresholds.begin());
        const std::int64_t inv_sigma = lut.entries[j];

        std::int64_t u = r_fp * inv_sigma;
        if (u > sat) {
            u = sat;
            out.overflow = true;
        } else if (u < -sat) {
            u = -sat;
            out.overflow = true;
        }
        const std::int64_t sq = u * u;
        if (__builtin_add_overflow(total, sq, &total)) {
            total = std::numeric_limits<std::int64_t>::max();
            total_overflow = true;
        }
    }
    if (total_overflow) {
        total = std::numeric_limits<std::int64_t>::max();
        out.overflow = true;
    }
    out.ebar = static_cast<double>(total) * h.final_scale;
    return out;
}

struct quant_bundle {
    sigma_lut lut;
    std::vector<quant_head> heads;
};

// Calibrate scales on a dev set and export every head.
inline quant_bundle quantize_heads(const backbone& bb, const std::vector<tap_head>& heads,
                                   const std::vector<tensor_d>& dev_xs) {
    check_arg(!heads.empty(), "quantize_heads: no heads");
    check_arg(!dev_xs.empty(), "quantize_heads: empty calibration set");
    quant_bundle out;
    out.lut = build_lut(heads.front().s_lo, heads.front().s_hi);
    std::vector<double> mx_prev(heads.size(), 0.0), mx_cur(heads.size(), 0.0), mx_z(heads.size(), 0.0);
    for (const tensor_d& x : dev_xs) {
        const activation_trace tr = forward_collect(bb, x);
        for (std::size_t t = 0; t < heads.size(); ++t) {
            const tap_head& h = heads[t];
            const vec& prev = tr.pooled[static_cast<std::size_t>(h.tap - 2)];
            const vec& cur = tr.pooled[static_cast<std::size_t>(h.tap - 1)];
            const vec z = project(h, prev);
            for (double v : prev) mx_prev[t] = std::max(mx_prev[t], std::fabs(v));
            for (double v : cur) mx_cur[t] = std::max(mx_cur[t], std::fabs(v));
            for (double v : z) mx_z[t] = std::max(mx_z[t], std::fabs(v));
        }
    }
    for (std::size_t t = 0; t < heads.size(); ++t) {
        check_arg(heads[t].s_lo == out.lut.lo && heads[t].s_hi == out.lut.hi,
                  "quantize_heads: heads disagree on log-variance clamp");
        out.heads.push_back(quantize_head(heads[t], mx_prev[t], mx_cur[t], mx_z[t], out.lut));
    }
    return out;
}

// Quantized tap surprisals for one trace.
inline std::vector<quant_score> quantized_tap_ebars(const quant_bundle& qb, const activation_trace& tr) {
    std::vector<quant_score> out;
    out.reserve(qb.heads.size());
    for (const quant_head& h : qb.heads) {
        const vec& prev = tr.pooled[static_cast<std::size_t>(h.tap - 2)];
        const vec& cur = tr.pooled[static_cast<std::size_t>(h.tap - 1)];
        out.push_back(quantized_ebar(quantize_activation(prev, h.s_in), quantize_activation(cur, h.s_t), h, qb.lut));
    }
    return out;
}

struct overhead_report {
    std::vector<std::int64_t> params_per_tap;  // 2*d*r + 2*d
    std::int64_t head_params = 0;
    double backbone_flops = 0.0;
    double extra_flops = 0.0;
    double rho = 0.0;
};

// Parameter counts for the prediction heads and the added-FLOP fraction:
// per tap, H*W*r for the pooled projection plus 2*r*d for the two linear
// maps, against the backbone MAC count.
inline overhead_report report_overhead(const backbone_spec& spec, const std::vector<tap_head>& heads) {
    overhead_report rep;
    rep.backbone_flops = backbone_flops(spec);
    for (const tap_head& h : heads) {
        const std::int64_t d = h.dim();
        const std::int64_t r = h.proj_rank();
        rep.params_per_tap.push_back(2 * d * r + 2 * d);
        rep.head_params += rep.params_per_tap.back();
        std::int64_t hw = 1;
        if (spec.kind == backbone_kind::conv) {
            std::int64_t ph = 1, pw = 1;
            conv_layer_hw(spec, h.tap - 1, ph, pw);
            hw = ph * pw;
        }
        rep.extra_flops += static_cast<double>(hw * r + 2 * r * d);
    }
    rep.rho = rep.extra_flops / rep.backbone_flops;
    return rep;
}

}  // namespace snapuq
