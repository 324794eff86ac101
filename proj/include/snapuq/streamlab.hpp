#pragma once

// Synthetic tasks, corruption operators, stream construction, and offline
// event labeling. Streams come in two flavors of the same generator: a
// labeled shadow copy carrying per-frame truth, and the unlabeled input
// sequence the scorer sees.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/error.hpp"
#include "snapuq/metrics.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/tensor.hpp"

namespace snapuq {

enum class regime_kind { id, cid, ood };

inline const char* regime_name(regime_kind r) {
    switch (r) {
        case regime_kind::id: return "id";
        case regime_kind::cid: return "cid";
        case regime_kind::ood: return "ood";
    }
    return "id";
}

enum class corruption_kind { none, noise, blur, contrast, occlude };

inline const char* corruption_name(corruption_kind c) {
    switch (c) {
        case corruption_kind::none: return "none";
        case corruption_kind::noise: return "noise";
        case corruption_kind::blur: return "blur";
        case corruption_kind::contrast: return "contrast";
        case corruption_kind::occlude: return "occlude";
    }
    return "none";
}

struct frame_truth {
    int label = -1;  // -1 for frames with no in-distribution label
    regime_kind regime = regime_kind::id;
    int severity = 0;
    corruption_kind corruption = corruption_kind::none;
};

struct labeled_stream {
    std::vector<tensor_d> inputs;
    std::vector<frame_truth> truth;
};

struct dataset {
    std::vector<tensor_d> xs;
    std::vector<int> ys;
};

struct task_data {
    dataset train;
    dataset dev;
    dataset id_pool;   // held-out in-distribution frames for streams
    dataset ood_pool;  // disjoint regime
    int classes = 0;
};

// Severity magnitude tables, index severity-1.
inline double noise_sigma(int severity) {
    static const double tab[5] = {0.05, 0.1, 0.2, 0.35, 0.5};
    return tab[severity - 1];
}
inline int blur_kernel(int severity) {
    static const int tab[5] = {1, 3, 3, 5, 5};
    return tab[severity - 1];
}
inline double contrast_gain(int severity) {
    static const double tab[5] = {0.9, 0.75, 0.6, 0.45, 0.3};
    return tab[severity - 1];
}
inline double occlusion_fraction(int severity) {
    static const double tab[5] = {0.05, 0.1, 0.2, 0.3, 0.4};
    return tab[severity - 1];
}

namespace detail {

inline void box_blur_2d(tensor_d& img, int k) {
    if (k <= 1) return;
    const std::int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
    const int half = k / 2;
    tensor_d out(img.shape);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (int dy = -half; dy <= half; ++dy)
                    for (int dx = -half; dx <= half; ++dx) {
                        const std::int64_t yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        acc += img.at3(ch, yy, xx);
                        ++cnt;
                    }
                out.at3(ch, y, x) = acc / cnt;
            }
    img = std::move(out);
}

inline void box_blur_1d(tensor_d& v, int k) {
    if (k <= 1) return;
    const std::int64_t n = static_cast<std::int64_t>(v.data.size());
    const int half = k / 2;
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        int cnt = 0;
        for (int d = -half; d <= half; ++d) {
            const std::int64_t j = i + d;
            if (j < 0 || j >= n) continue;
            acc += v.data[static_cast<std::size_t>(j)];
            ++cnt;
        }
        out[static_cast<std::size_t>(i)] = acc / cnt;
    }
    v.data = std::move(out);
}

}  // namespace detail

// Severity 0 is a bitwise identity. Noise and occlusion placement consume
// randomness from the caller's stream; blur and contrast are deterministic.
inline tensor_d apply_corruption(const tensor_d& x, corruption_kind kind, int severity, rng& g) {
    if (severity == 0 || kind == corruption_kind::none) return x;
    check_arg(severity >= 1 && severity <= 5, "apply_corruption: severity out of range");
    tensor_d out = x;
    switch (kind) {
        case corruption_kind::noise: {
            const double sd = noise_sigma(severity);
            for (double& v : out.data) v += sd * g.normal();
            break;
        }
        case corruption_kind::blur: {
            const int k = blur_kernel(severity);
            if (out.shape.size() == 3)
                detail::box_blur_2d(out, k);
            else
                detail::box_blur_1d(out, k);
            break;
        }
        case corruption_kind::contrast: {
            const double gain = contrast_gain(severity);
            double mean = 0.0;
            for (double v : out.data) mean += v;
            mean /= static_cast<double>(out.data.size());
            for (double& v : out.data) v = mean + gain * (v - mean);
            break;
        }
        case corruption_kind::occlude: {
            const double frac = occlusion_fraction(severity);
            if (out.shape.size() == 3) {
                const std::int64_t h = out.shape[1], w = out.shape[2];
                const std::int64_t side = std::max<std::int64_t>(
                    1, static_cast<std::int64_t>(std::lround(std::sqrt(frac * static_cast<double>(h * w)))));
                const std::int64_t sy = side >= h ? 0 : g.below(h - side + 1);
                const std::int64_t sx = side >= w ? 0 : g.below(w - side + 1);
                for (std::int64_t c = 0; c < out.shape[0]; ++c)
                    for (std::int64_t y = sy; y < std::min(h, sy + side); ++y)
                        for (std::int64_t xx = sx; xx < std::min(w, sx + side); ++xx) out.at3(c, y, xx) = 0.0;
            } else {
                const std::int64_t n = static_cast<std::int64_t>(out.data.size());
                const std::int64_t len =
                    std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(frac * static_cast<double>(n))));
                const std::int64_t st = len >= n ? 0 : g.below(n - len + 1);
                for (std::int64_t i = st; i < std::min(n, st + len); ++i) out.data[static_cast<std::size_t>(i)] = 0.0;
            }
            break;
        }
        case corruption_kind::none: break;
    }
    return out;
}

// Gaussian-cluster vector task: 4 classes in 16 dimensions, unit-variance
// clusters around well-separated means. OOD uses a disjoint mean set drawn
// from a different substream and shifted away from the ID span.
inline task_data make_vector_task(std::uint64_t seed, std::int64_t n_train = 1200, std::int64_t n_dev = 400,
                                  std::int64_t n_id_pool = 1500, std::int64_t n_ood_pool = 400) {
    constexpr int classes = 4;
    constexpr std::int64_t dim = 16;
    task_data td;
    td.classes = classes;
    rng root(seed);
    rng mean_rng = root.split(0x4D45414E);
    std::vector<vec> means(classes, vec(dim, 0.0));
    for (auto& m : means) {
        double norm = 0.0;
        for (auto& v : m) {
            v = mean_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : m) v *= 3.0 / norm;
    }
    std::vector<vec> ood_means(classes, vec(dim, 0.0));
    for (auto& m : ood_means) {
        double norm = 0.0;
        for (auto& v : m) {
            v = mean_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : m) v *= 6.0 / norm;
    }

    const auto fill = [&](dataset& ds, std::int64_t n, const std::vector<vec>& ms, rng g, bool labeled) {
        for (std::int64_t i = 0; i < n; ++i) {
            const int y = static_cast<int>(g.below(classes));
            // Heavy-tailed slice: a fraction of every split sits far from its
            // class mean, so the hard examples are also the atypical ones.
            const double spread = g.uniform01() < 0.12 ? 1.75 + 1.25 * g.uniform01() : 1.0;
            tensor_d x({dim});
            for (std::int64_t k = 0; k < dim; ++k)
                x.data[static_cast<std::size_t>(k)] =
                    ms[static_cast<std::size_t>(y)][static_cast<std::size_t>(k)] + spread * g.normal();
            ds.xs.push_back(std::move(x));
            ds.ys.push_back(labeled ? y : -1);
        }
    };
    fill(td.train, n_train, means, root.split(0x545249ull), true);
    fill(td.dev, n_dev, means, root.split(0x444556ull), true);
    fill(td.id_pool, n_id_pool, means, root.split(0x504F4Full), true);
    fill(td.ood_pool, n_ood_pool, ood_means, root.split(0x4F4F44ull), false);
    return td;
}

namespace detail {

inline void draw_shape(tensor_d& img, int cls, double intensity, rng& g) {
    const std::int64_t jitter = g.below(9) - 4;
    switch (cls) {
        case 0: {  // horizontal bar
            const std::int64_t row = 13 + jitter;
            for (std::int64_t y = row - 1; y <= row + 1; ++y)
                for (std::int64_t x = 3; x < 25; ++x) img.at3(0, y, x) = intensity;
            break;
        }
        case 1: {  // vertical bar
            const std::int64_t col = 13 + jitter;
            for (std::int64_t y = 3; y < 25; ++y)
                for (std::int64_t x = col - 1; x <= col + 1; ++x) img.at3(0, y, x) = intensity;
            break;
        }
        case 2: {  // filled square
            const std::int64_t top = 9 + jitter, left = 9 + g.below(9) - 4;
            for (std::int64_t y = top; y < top + 10; ++y)
                for (std::int64_t x = left; x < left + 10; ++x) img.at3(0, y, x) = intensity;
            break;
        }
        default: {  // diagonal cross
            const std::int64_t off = jitter;
            for (std::int64_t t = 4; t < 24; ++t) {
                for (std::int64_t w = -1; w <= 1; ++w) {
                    const std::int64_t a = std::clamp<std::int64_t>(t + w + off, 0, 27);
                    img.at3(0, t, a) = intensity;
                    img.at3(0, t, std::clamp<std::int64_t>(27 - t + w + off, 0, 27)) = intensity;
                }
            }
            break;
        }
    }
}

// Two hard slices keep labeled splits off the 100%-accuracy ceiling on every
// seed and concentrate the errors on visually atypical renders: noisy frames,
// and two-shape blends whose label follows the primary shape even when the
// ghost shape dominates.
inline tensor_d render_glyph(int cls, rng& g) {
    tensor_d img({1, 28, 28});
    const double intensity = 0.7 + 0.3 * g.uniform01();
    draw_shape(img, cls, intensity, g);
    if (g.uniform01() < 0.12) {
        const int ghost = static_cast<int>((cls + 1 + g.below(3)) % 4);
        const double w = 0.6 + 0.75 * g.uniform01();
        tensor_d overlay({1, 28, 28});
        draw_shape(overlay, ghost, intensity * w, g);
        for (std::size_t i = 0; i < img.data.size(); ++i)
            img.data[i] = std::clamp(img.data[i] + overlay.data[i], 0.0, 1.0);
    }
    const bool noisy = g.uniform01() < 0.2;
    const double noise = noisy ? 0.2 + 0.25 * g.uniform01() : 0.1;
    for (double& v : img.data) v = std::clamp(v + noise * g.normal(), 0.0, 1.0);
    return img;
}

}  // namespace detail

// Synthetic 28x28 glyph task; OOD frames are intensity-inverted glyphs.
inline task_data make_glyph_task(std::uint64_t seed, std::int64_t n_train = 800, std::int64_t n_dev = 240,
                                 std::int64_t n_id_pool = 1000, std::int64_t n_ood_pool = 300) {
    constexpr int classes = 4;
    task_data td;
    td.classes = classes;
    rng root(seed);
    const auto fill = [&](dataset& ds, std::int64_t n, rng g, bool invert, bool labeled) {
        for (std::int64_t i = 0; i < n; ++i) {
            const int y = static_cast<int>(g.below(classes));
            tensor_d img = detail::render_glyph(y, g);
            if (invert)
                for (double& v : img.data) v = 1.0 - v;
            ds.xs.push_back(std::move(img));
            ds.ys.push_back(labeled ? y : -1);
        }
    };
    fill(td.train, n_train, root.split(0x545249ull), false, true);
    fill(td.dev, n_dev, root.split(0x444556ull), false, true);
    fill(td.id_pool, n_id_pool, root.split(0x504F4Full), false, true);
    fill(td.ood_pool, n_ood_pool, root.split(0x4F4F44ull), true, false);
    return td;
}

struct stream_spec {
    std::uint64_t seed = 99;
    std::int64_t id_len = 200;
    std::int64_t cid_len = 100;
    std::int64_t ood_len = 20;
    std::int64_t window = 20;  // labeling window m
    std::int64_t cycle = 25;   // corruption-type cycle period inside CID segments

    void set_paper_scale() {
        id_len = 2000;
        cid_len = 1000;
        ood_len = 100;
        window = 100;
        cycle = 200;
    }

    std::int64_t total_frames() const { return id_len + 5 * cid_len + 4 * ood_len; }

    void validate() const {
        check_arg(id_len >= window && cid_len >= window && ood_len >= 1, "stream_spec: segment shorter than window");
        check_arg(window >= 2, "stream_spec: window too small");
        check_arg(cycle >= 1, "stream_spec: cycle must be positive");
    }
};

// Segment order: ID, then [CID(s), OOD burst] for severities 1..4, then
// CID(5). Corruption type cycles inside each CID segment. One seed drives
// everything, so two builds agree frame-by-frame and the unlabeled copy is
// the labeled copy minus truth.
inline labeled_stream build_stream(const stream_spec& spec, const dataset& id_pool, const dataset& ood_pool) {
    spec.validate();
    check_arg(!id_pool.xs.empty(), "build_stream: empty ID pool");
    check_arg(!ood_pool.xs.empty(), "build_stream: empty OOD pool");
    labeled_stream out;
    out.inputs.reserve(static_cast<std::size_t>(spec.total_frames()));
    rng g = rng(spec.seed).split(0x53545245ull);

    static const corruption_kind kinds[4] = {corruption_kind::noise, corruption_kind::blur,
                                             corruption_kind::contrast, corruption_kind::occlude};

    const auto push_id = [&](std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t j = g.below(static_cast<std::int64_t>(id_pool.xs.size()));
            out.inputs.push_back(id_pool.xs[static_cast<std::size_t>(j)]);
            out.truth.push_back({id_pool.ys[static_cast<std::size_t>(j)], regime_kind::id, 0, corruption_kind::none});
        }
    };
    const auto push_cid = [&](std::int64_t n, int severity) {
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t j = g.below(static_cast<std::int64_t>(id_pool.xs.size()));
            const corruption_kind kind = kinds[(i / spec.cycle) % 4];
            out.inputs.push_back(apply_corruption(id_pool.xs[static_cast<std::size_t>(j)], kind, severity, g));
            out.truth.push_back({id_pool.ys[static_cast<std::size_t>(j)], regime_kind::cid, severity, kind});
        }
    };
    const auto push_ood = [&](std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t j = g.below(static_cast<std::int64_t>(ood_pool.xs.size()));
            out.inputs.push_back(ood_pool.xs[static_cast<std::size_t>(j)]);
            out.truth.push_back({-1, regime_kind::ood, 0, corruption_kind::none});
        }
    };

    push_id(spec.id_len);
    for (int s = 1; s <= 4; ++s) {
        push_cid(spec.cid_len, s);
        push_ood(spec.ood_len);
    }
    push_cid(spec.cid_len, 5);
    return out;
}

struct id_band {
    double mu = 0.0;
    double sigma = 0.0;
    std::int64_t window = 0;
};

// Windowed-accuracy statistics over an ID-only run; the band drives the
// offline event labeler.
inline id_band estimate_id_band(const std::vector<int>& correct, std::int64_t m) {
    check_arg(static_cast<std::int64_t>(correct.size()) >= m, "estimate_id_band: run shorter than window");
    id_band band;
    band.window = m;
    std::vector<double> accs;
    double run = 0.0;
    for (std::size_t t = 0; t < correct.size(); ++t) {
        run += correct[t];
        if (static_cast<std::int64_t>(t) >= m) run -= correct[t - static_cast<std::size_t>(m)];
        if (static_cast<std::int64_t>(t) >= m - 1) accs.push_back(run / static_cast<double>(m));
    }
    for (double a : accs) band.mu += a;
    band.mu /= static_cast<double>(accs.size());
    for (double a : accs) band.sigma += (a - band.mu) * (a - band.mu);
    band.sigma = std::sqrt(band.sigma / static_cast<double>(accs.size()));
    return band;
}

// Offline labeler: flag frames whose trailing-window accuracy drops below
// mu - 3 sigma, merge flagged runs separated by fewer than m frames, then
// drop events shorter than m.
inline std::vector<event_interval> label_events(const std::vector<int>& correct, std::int64_t m, double mu_id,
                                                double sigma_id) {
    check_arg(static_cast<std::int64_t>(correct.size()) >= m, "label_events: stream shorter than window");
    const double bound = mu_id - 3.0 * sigma_id;
    const std::int64_t n = static_cast<std::int64_t>(correct.size());
    std::vector<bool> flag(static_cast<std::size_t>(n), false);
    double run = 0.0;
    for (std::int64_t t = 0; t < n; ++t) {
        run += correct[static_cast<std::size_t>(t)];
        if (t >= m) run -= correct[static_cast<std::size_t>(t - m)];
        if (t >= m - 1) flag[static_cast<std::size_t>(t)] = run / static_cast<double>(m) < bound;
    }
    std::vector<event_interval> raw;
    std::int64_t t = 0;
    while (t < n) {
        if (!flag[static_cast<std::size_t>(t)]) {
            ++t;
            continue;
        }
        std::int64_t on = t;
        while (t < n && flag[static_cast<std::size_t>(t)]) ++t;
        raw.push_back({on, t - 1});
    }
    std::vector<event_interval> merged;
    for (const event_interval& e : raw) {
        if (!merged.empty() && e.onset - merged.back().offset - 1 < m)
            merged.back().offset = e.offset;
        else
            merged.push_back(e);
    }
    std::vector<event_interval> out;
    for (const event_interval& e : merged)
        if (e.offset - e.onset + 1 >= m) out.push_back(e);
    return out;
}

inline std::vector<int> event_frame_mask(std::size_t n, const std::vector<event_interval>& events) {
    std::vector<int> mask(n, 0);
    for (const event_interval& e : events)
        for (std::int64_t t = e.onset; t <= e.offset && t < static_cast<std::int64_t>(n); ++t)
            mask[static_cast<std::size_t>(t)] = 1;
    return mask;
}

struct severity_series {
    std::vector<double> auprc;  // index 0..5; index 0 is the degenerate clean-only point
    bool degenerate_s0 = true;
};

// Per-severity detection AUPRC over clean-ID frames plus the CID frames of
// one severity, with event frames as positives. The severity-0 subset has no
// positives by construction and is pinned to zero.
inline severity_series severity_auprc_series(const std::vector<double>& scores, const std::vector<frame_truth>& truth,
                                             const std::vector<int>& event_mask) {
    check_arg(scores.size() == truth.size() && scores.size() == event_mask.size(),
              "severity_auprc_series: size mismatch");
    severity_series out;
    out.auprc.assign(6, 0.0);
    for (int s = 1; s <= 5; ++s) {
        std::vector<double> sub_scores;
        std::vector<int> sub_labels;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const bool clean_id = truth[i].regime == regime_kind::id;
            const bool cid_s = truth[i].regime == regime_kind::cid && truth[i].severity == s;
            if (!clean_id && !cid_s) continue;
            sub_scores.push_back(scores[i]);
            sub_labels.push_back(event_mask[i]);
        }
        bool has_pos = false;
        for (int l : sub_labels)
            if (l) has_pos = true;
        out.auprc[static_cast<std::size_t>(s)] = has_pos ? frame_auprc(sub_scores, sub_labels) : 0.0;
    }
    return out;
}

// Stream serialization: a frames file with all inputs as little-endian f32,
// plus a JSON truth sidecar.
inline void write_stream(const std::string& prefix, const labeled_stream& st) {
    check_arg(!st.inputs.empty(), "write_stream: empty stream");
    const std::vector<std::int64_t>& shape = st.inputs.front().shape;
    for (const tensor_d& x : st.inputs)
        check_arg(x.shape == shape, "write_stream: inconsistent frame shapes");

    std::ofstream f(prefix + ".frames", std::ios::binary);
    if (!f) throw artifact_error("write_stream: cannot open " + prefix + ".frames");
    const char magic[8] = {'S', 'N', 'P', 'S', 'T', 'R', 'M', '\0'};
    f.write(magic, 8);
    const std::uint64_t n = st.inputs.size();
    const std::uint64_t nd = shape.size();
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(reinterpret_cast<const char*>(&nd), 8);
    for (std::int64_t d : shape) {
        const std::uint64_t v = static_cast<std::uint64_t>(d);
        f.write(reinterpret_cast<const char*>(&v), 8);
    }
    std::vector<float> buf;
    for (const tensor_d& x : st.inputs) {
        buf.resize(x.data.size());
        for (std::size_t i = 0; i < x.data.size(); ++i) buf[i] = static_cast<float>(x.data[i]);
        f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!f) throw artifact_error("write_stream: short write on " + prefix + ".frames");
    f.close();

    nlohmann::json truth = nlohmann::json::array();
    for (const frame_truth& t : st.truth)
        truth.push_back({{"label", t.label},
                         {"regime", regime_name(t.regime)},
                         {"severity", t.severity},
                         {"corruption", corruption_name(t.corruption)}});
    std::ofstream tf(prefix + ".truth.json");
    if (!tf) throw artifact_error("write_stream: cannot open " + prefix + ".truth.json");
    tf << truth.dump(2) << "\n";
}

inline regime_kind regime_from_name(const std::string& s) {
    if (s == "id") return regime_kind::id;
    if (s == "cid") return regime_kind::cid;
    if (s == "ood") return regime_kind::ood;
    throw artifact_error("unknown regime: " + s);
}

inline corruption_kind corruption_from_name(const std::string& s) {
    if (s == "none") return corruption_kind::none;
    if (s == "noise") return corruption_kind::noise;
    if (s == "blur") return corruption_kind::blur;
    if (s == "contrast") return corruption_kind::contrast;
    if (s == "occlude") return corruption_kind::occlude;
    throw artifact_error("unknown corruption: " + s);
}

inline labeled_stream read_stream(const std::string& prefix, bool with_truth = true) {
    std::ifstream f(prefix + ".frames", std::ios::binary);
    if (!f) throw artifact_error("read_stream: cannot open " + prefix + ".frames");
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "SNPSTRM\0", 8) != 0) throw artifact_error("read_stream: bad magic");
    std::uint64_t n = 0, nd = 0;
    f.read(reinterpret_cast<char*>(&n), 8);
    f.read(reinterpret_cast<char*>(&nd), 8);
    if (!f || nd == 0 || nd > 4) throw artifact_error("read_stream: bad header");
    std::vector<std::int64_t> shape(nd);
    std::uint64_t numel = 1;
    for (std::uint64_t i = 0; i < nd; ++i) {
        std::uint64_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 8);
        shape[i] = static_cast<std::int64_t>(v);
        numel *= v;
    }
    if (!f || numel == 0 || numel > (1ull << 24)) throw artifact_error("read_stream: bad shape");
    labeled_stream st;
    std::vector<float> buf(numel);
    for (std::uint64_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(numel * 4));
        if (!f) throw artifact_error("read_stream: truncated frames file");
        tensor_d x(shape);
        for (std::uint64_t k = 0; k < numel; ++k) x.data[k] = buf[k];
        st.inputs.push_back(std::move(x));
    }
    if (!with_truth) return st;

    std::ifstream tf(prefix + ".truth.json");
    if (!tf) throw artifact_error("read_stream: cannot open " + prefix + ".truth.json");
    nlohmann::json truth = nlohmann::json::parse(tf, nullptr, false);
    if (truth.is_discarded() || !truth.is_array() || truth.size() != n)
        throw artifact_error("read_stream: bad truth sidecar");
    for (const auto& t : truth)
        st.truth.push_back({t.at("label").get<int>(), regime_from_name(t.at("regime").get<std::string>()),
                            t.at("severity").get<int>(),
                            corruption_from_name(t.at("corruption").get<std::string>())});
    return st;
}

}  // namespace snapuq
