#pragma once

// Small trainable backbones with per-layer activation capture. Two families
// are provided: a fully connected net for vector inputs and a strided 3x3
// conv stack for single-channel images. Layer indices are 1-based; layer D is
// the last feature layer and the classifier reads its (pooled) output.

#include <cstdint>
#include <string>
#include <vector>

#include "snapuq/error.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

enum class backbone_kind { mlp, conv };

struct backbone_spec {
    backbone_kind kind = backbone_kind::mlp;

    // mlp
    std::int64_t input_dim = 16;
    std::vector<std::int64_t> hidden = {64, 64};

    // conv
    std::int64_t in_c = 1;
    std::int64_t in_h = 28;
    std::int64_t in_w = 28;
    std::vector<std::int64_t> channels = {8, 16, 32, 32};
    std::vector<std::int64_t> strides = {1, 2, 1, 2};

    std::int64_t classes = 4;

    // Prediction taps; each tap l models layer l from layer l-1.
    std::vector<int> taps = {2};

    std::int64_t depth() const {
        return kind == backbone_kind::mlp ? static_cast<std::int64_t>(hidden.size())
                                          : static_cast<std::int64_t>(channels.size());
    }

    // Width of the per-layer vector seen by the heads (channels for conv).
    std::int64_t layer_width(std::int64_t l) const {
        check_arg(l >= 0 && l <= depth(), "layer_width: bad layer index");
        if (l == 0) return kind == backbone_kind::mlp ? input_dim : in_c;
        return kind == backbone_kind::mlp ? hidden[static_cast<std::size_t>(l - 1)]
                                          : channels[static_cast<std::size_t>(l - 1)];
    }

    void validate() const {
        if (classes < 2) throw config_error("backbone: classes must be >= 2");
        if (depth() < 2) throw config_error("backbone: need at least two feature layers");
        if (taps.empty()) throw config_error("backbone: at least one tap required");
        int prev = 1;
        for (int t : taps) {
            if (t < 2 || t > depth())
                throw config_error("backbone: tap index " + std::to_string(t) + " outside [2, depth]");
            if (t <= prev) throw config_error("backbone: tap indices must be strictly increasing");
            prev = t;
        }
        if (kind == backbone_kind::conv) {
            if (strides.size() != channels.size()) throw config_error("backbone: strides/channels length mismatch");
            if (in_c < 1 || in_h < 4 || in_w < 4) throw config_error("backbone: bad conv input dims");
        } else {
            if (input_dim < 1) throw config_error("backbone: bad input_dim");
            for (std::int64_t h : hidden)
                if (h < 1) throw config_error("backbone: bad hidden width");
        }
    }
};

inline backbone_spec default_mlp_spec(std::int64_t input_dim = 16, std::int64_t classes = 4) {
    backbone_spec s;
    s.kind = backbone_kind::mlp;
    s.input_dim = input_dim;
    s.hidden = {64, 64};
    s.classes = classes;
    s.taps = {2};
    return s;
}

inline backbone_spec default_conv_spec(std::int64_t classes = 4) {
    backbone_spec s;
    s.kind = backbone_kind::conv;
    s.in_c = 1;
    s.in_h = 28;
    s.in_w = 28;
    s.channels = {8, 16, 32, 32};
    s.strides = {1, 2, 1, 2};
    s.classes = classes;
    s.taps = {2, 4};
    return s;
}

// Spatial size of layer l's output (conv only; layer 0 is the input).
inline void conv_layer_hw(const backbone_spec& spec, std::int64_t l, std::int64_t& h, std::int64_t& w) {
    h = spec.in_h;
    w = spec.in_w;
    for (std::int64_t i = 0; i < l; ++i) {
        const std::int64_t s = spec.strides[static_cast<std::size_t>(i)];
        h = (h + s - 1) / s;
        w = (w + s - 1) / s;
    }
}

struct backbone {
    backbone_spec spec;
    std::vector<tensor_d> w;  // mlp: (out,in); conv: (out_c,in_c,3,3)
    std::vector<vec> b;
    tensor_d cw;  // classifier on pooled final features
    vec cb;
};

struct backbone_grads {
    std::vector<tensor_d> w;
    std::vector<vec> b;
    tensor_d cw;
    vec cb;
};

inline backbone_grads zero_grads(const backbone& bb) {
    backbone_grads g;
    g.w.reserve(bb.w.size());
    g.b.reserve(bb.b.size());
    for (const auto& t : bb.w) g.w.push_back(tensor_d(t.shape));
    for (const auto& v : bb.b) g.b.push_back(vec(v.size(), 0.0));
    g.cw = tensor_d(bb.cw.shape);
    g.cb.assign(bb.cb.size(), 0.0);
    return g;
}

// He-uniform weights, zero biases.
inline backbone init_backbone(const backbone_spec& spec, std::uint64_t seed) {
    spec.validate();
    backbone bb;
    bb.spec = spec;
    rng gen = rng(seed).split(0x6262);  // dedicated init stream
    auto fill = [&gen](tensor_d& t, double fan_in) {
        const double limit = std::sqrt(6.0 / fan_in);
        for (auto& v : t.data) v = gen.uniform(-limit, limit);
    };
    const std::int64_t depth = spec.depth();
    for (std::int64_t l = 1; l <= depth; ++l) {
        if (spec.kind == backbone_kind::mlp) {
            tensor_d t({spec.layer_width(l), spec.layer_width(l - 1)});
            fill(t, static_cast<double>(spec.layer_width(l - 1)));
            bb.w.push_back(std::move(t));
        } else {
            tensor_d t({spec.layer_width(l), spec.layer_width(l - 1), 3, 3});
            fill(t, static_cast<double>(spec.layer_width(l - 1) * 9));
            bb.w.push_back(std::move(t));
        }
        bb.b.push_back(vec(static_cast<std::size_t>(spec.layer_width(l)), 0.0));
    }
    bb.cw = tensor_d({spec.classes, spec.layer_width(depth)});
    fill(bb.cw, static_cast<double>(spec.layer_width(depth)));
    bb.cb.assign(static_cast<std::size_t>(spec.classes), 0.0);
    return bb;
}

struct activation_trace {
    std::vector<tensor_d> acts;  // post-ReLU, layers 1..D (index 0 -> layer 1)
    std::vector<vec> pooled;     // per-channel means for conv, copies for mlp
    vec logits;
    vec post;
};

namespace detail {

inline vec gap(const tensor_d& m) {
    const std::int64_t c = m.dim(0), h = m.dim(1), w = m.dim(2);
    vec out(static_cast<std::size_t>(c), 0.0);
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) acc += m.at3(ci, y, x);
        out[static_cast<std::size_t>(ci)] = acc * inv;
    }
    return out;
}

// 3x3 conv, pad 1. Output spatial size ceil(in/stride).
inline tensor_d conv2d(const tensor_d& in, const tensor_d& k, const vec& bias, std::int64_t stride) {
    const std::int64_t ci = in.dim(0), ih = in.dim(1), iw = in.dim(2);
    const std::int64_t co = k.dim(0);
    check_arg(k.dim(1) == ci, "conv2d: channel mismatch");
    const std::int64_t oh = (ih + stride - 1) / stride;
    const std::int64_t ow = (iw + stride - 1) / stride;
    tensor_d out({co, oh, ow});
    for (std::int64_t o = 0; o < co; ++o) {
        for (std::int64_t y = 0; y < oh; ++y) {
            for (std::int64_t x = 0; x < ow; ++x) {
                double acc = bias[static_cast<std::size_t>(o)];
                const std::int64_t cy = y * stride, cx = x * stride;
                for (std::int64_t c = 0; c < ci; ++c) {
                    for (std::int64_t ky = 0; ky < 3; ++ky) {
                        const std::int64_t sy = cy + ky - 1;
                        if (sy < 0 || sy >= ih) continue;
                        for (std::int64_t kx = 0; kx < 3; ++kx) {
                            const std::int64_t sx = cx + kx - 1;
                            if (sx < 0 || sx >= iw) continue;
                            acc += k.at4(o, c, ky, kx) * in.at3(c, sy, sx);
                        }
                    }
                }
                out.at3(o, y, x) = acc;
            }
        }
    }
    return out;
}

// Accumulates kernel/bias/input gradients for conv2d.
inline void conv2d_backward(const tensor_d& in, const tensor_d& k, std::int64_t stride, const tensor_d& dout,
                            tensor_d& dk, vec& db, tensor_d& din) {
    const std::int64_t ci = in.dim(0), ih = in.dim(1), iw = in.dim(2);
    const std::int64_t co = k.dim(0), oh = dout.dim(1), ow = dout.dim(2);
    for (std::int64_t o = 0; o < co; ++o) {
        for (std::int64_t y = 0; y < oh; ++y) {
            for (std::int64_t x = 0; x < ow; ++x) {
                const double g = dout.at3(o, y, x);
                if (g == 0.0) continue;
                db[static_cast<std::size_t>(o)] += g;
                const std::int64_t cy = y * stride, cx = x * stride;
                for (std::int64_t c = 0; c < ci; ++c) {
                    for (std::int64_t ky = 0; ky < 3; ++ky) {
                        const std::int64_t sy = cy + ky - 1;
                        if (sy < 0 || sy >= ih) continue;
                        for (std::int64_t kx = 0; kx < 3; ++kx) {
                            const std::int64_t sx = cx + kx - 1;
                            if (sx < 0 || sx >= iw) continue;
                            dk.at4(o, c, ky, kx) += g * in.at3(c, sy, sx);
                            din.at3(c, sy, sx) += g * k.at4(o, c, ky, kx);
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline void validate_input(const backbone_spec& spec, const tensor_d& x) {
    if (spec.kind == backbone_kind::mlp) {
        check_arg(x.rank() == 1 && x.dim(0) == spec.input_dim, "forward: input shape mismatch");
    } else {
        check_arg(x.rank() == 3 && x.dim(0) == spec.in_c && x.dim(1) == spec.in_h && x.dim(2) == spec.in_w,
                  "forward: input shape mismatch");
    }
}

// Runs the net and records every post-ReLU layer plus pooled views, logits
// and softmax posteriors.
inline activation_trace forward_collect(const backbone& bb, const tensor_d& x) {
    validate_input(bb.spec, x);
    activation_trace tr;
    const std::int64_t depth = bb.spec.depth();
    tr.acts.reserve(static_cast<std::size_t>(depth));
    tr.pooled.reserve(static_cast<std::size_t>(depth));
    if (bb.spec.kind == backbone_kind::mlp) {
        vec cur(x.data);
        for (std::int64_t l = 0; l < depth; ++l) {
            vec h = matvec(bb.w[static_cast<std::size_t>(l)], cur);
            for (std::size_t i = 0; i < h.size(); ++i) {
                h[i] += bb.b[static_cast<std::size_t>(l)][i];
                if (h[i] < 0.0) h[i] = 0.0;
            }
            tensor_d a({static_cast<std::int64_t>(h.size())});
            a.data = h;
            tr.acts.push_back(std::move(a));
            tr.pooled.push_back(h);
            cur = std::move(h);
        }
    } else {
        tensor_d cur = x;
        for (std::int64_t l = 0; l < depth; ++l) {
            tensor_d h = detail::conv2d(cur, bb.w[static_cast<std::size_t>(l)], bb.b[static_cast<std::size_t>(l)],
                                        bb.spec.strides[static_cast<std::size_t>(l)]);
            for (auto& v : h.data)
                if (v < 0.0) v = 0.0;
            tr.pooled.push_back(detail::gap(h));
            cur = h;
            tr.acts.push_back(std::move(h));
        }
    }
    tr.logits = matvec(bb.cw, tr.pooled.back());
    for (std::size_t i = 0; i < tr.logits.size(); ++i) tr.logits[i] += bb.cb[i];
    tr.post = softmax(tr.logits);
    return tr;
}

// Backward pass from classifier gradients plus optional extra gradients on
// the pooled per-layer vectors (index 0 -> layer 1; empty entries mean zero).
// Gradients accumulate into g.
inline void backward_collect(const backbone& bb, const tensor_d& x, const activation_trace& tr, const vec& dlogits,
                             const std::vector<vec>& extra_pooled, backbone_grads& g) {
    const std::int64_t depth = bb.spec.depth();
    check_arg(dlogits.size() == static_cast<std::size_t>(bb.spec.classes), "backward: dlogits size");
    check_arg(extra_pooled.empty() || extra_pooled.size() == static_cast<std::size_t>(depth),
              "backward: extra_pooled size");

    add_outer(g.cw, dlogits, tr.pooled.back());
    for (std::size_t i = 0; i < dlogits.size(); ++i) g.cb[i] += dlogits[i];
    vec dpool_last = matvec_t(bb.cw, dlogits);

    if (bb.spec.kind == backbone_kind::mlp) {
        vec dact = std::move(dpool_last);
        for (std::int64_t l = depth - 1; l >= 0; --l) {
            const std::size_t li = static_cast<std::size_t>(l);
            if (!extra_pooled.empty() && !extra_pooled[li].empty()) {
                check_arg(extra_pooled[li].size() == dact.size(), "backward: extra grad width");
                for (std::size_t i = 0; i < dact.size(); ++i) dact[i] += extra_pooled[li][i];
            }
            const vec& a = tr.pooled[li];
            for (std::size_t i = 0; i < dact.size(); ++i)
                if (a[i] <= 0.0) dact[i] = 0.0;
            const vec& prev = (l == 0) ? x.data : tr.pooled[li - 1];
            add_outer(g.w[li], dact, prev);
            for (std::size_t i = 0; i < dact.size(); ++i) g.b[li][i] += dact[i];
            if (l > 0) dact = matvec_t(bb.w[li], dact);
        }
    } else {
        // Spread pooled gradients uniformly over spatial positions.
        auto spread = [](const vec& dpool, const tensor_d& like) {
            tensor_d out(like.shape);
            const std::int64_t c = like.dim(0), h = like.dim(1), w = like.dim(2);
            const double inv = 1.0 / static_cast<double>(h * w);
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double v = dpool[static_cast<std::size_t>(ci)] * inv;
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t xx = 0; xx < w; ++xx) out.at3(ci, y, xx) = v;
            }
            return out;
        };
        tensor_d dact = spread(dpool_last, tr.acts.back());
        for (std::int64_t l = depth - 1; l >= 0; --l) {
            const std::size_t li = static_cast<std::size_t>(l);
            if (!extra_pooled.empty() && !extra_pooled[li].empty()) {
                tensor_d extra = spread(extra_pooled[li], tr.acts[li]);
                for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] += extra.data[i];
            }
            for (std::size_t i = 0; i < dact.data.size(); ++i)
                if (tr.acts[li].data[i] <= 0.0) dact.data[i] = 0.0;
            const tensor_d& prev = (l == 0) ? x : tr.acts[li - 1];
            tensor_d din(prev.shape);
            detail::conv2d_backward(prev, bb.w[li], bb.spec.strides[li], dact, g.w[li], g.b[li], din);
            dact = std::move(din);
        }
    }
}

// Mean cross-entropy over a batch plus parameter gradients.
inline double clf_loss_grad(const backbone& bb, const std::vector<tensor_d>& xs, const std::vector<int>& ys,
                            backbone_grads& g) {
    check_arg(!xs.empty() && xs.size() == ys.size(), "clf_loss_grad: bad batch");
    const double invn = 1.0 / static_cast<double>(xs.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const int y = ys[i];
        check_arg(y >= 0 && y < bb.spec.classes, "clf_loss_grad: label out of range");
        activation_trace tr = forward_collect(bb, xs[i]);
        loss += (stable_logsumexp(tr.logits) - tr.logits[static_cast<std::size_t>(y)]) * invn;
        vec dlogits = tr.post;
        dlogits[static_cast<std::size_t>(y)] -= 1.0;
        for (auto& v : dlogits) v *= invn;
        backward_collect(bb, xs[i], tr, dlogits, {}, g);
    }
    return loss;
}

// Multiply-add count of one forward pass.
inline double backbone_flops(const backbone_spec& spec) {
    double f = 0.0;
    if (spec.kind == backbone_kind::mlp) {
        for (std::int64_t l = 1; l <= spec.depth(); ++l)
            f += static_cast<double>(spec.layer_width(l) * spec.layer_width(l - 1));
    } else {
        for (std::int64_t l = 1; l <= spec.depth(); ++l) {
            std::int64_t h = 0, w = 0;
            conv_layer_hw(spec, l, h, w);
            f += static_cast<double>(h * w * spec.layer_width(l) * spec.layer_width(l - 1) * 9);
        }
    }
    f += static_cast<double>(spec.classes * spec.layer_width(spec.depth()));
    return f;
}

inline void collect_params(backbone& bb, std::vector<param_view>& out) {
    for (auto& t : bb.w) out.push_back({t.data.data(), t.data.size()});
    for (auto& v : bb.b) out.push_back({v.data(), v.size()});
    out.push_back({bb.cw.data.data(), bb.cw.data.size()});
    out.push_back({bb.cb.data(), bb.cb.size()});
}

inline void collect_grads(backbone_grads& g, std::vector<param_view>& out) {
    for (auto& t : g.w) out.push_back({t.data.data(), t.data.size()});
    for (auto& v : g.b) out.push_back({v.data(), v.size()});
    out.push_back({g.cw.data.data(), g.cw.data.size()});
    out.push_back({g.cb.data(), g.cb.size()});
}

}  // namespace snapuq
