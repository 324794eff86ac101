#pragma once

// The trained artifact as one container file: backbone weights, tap heads,
// scoring configuration, the ID accuracy band, the dataset recipe needed to
// regenerate calibration data, and the optional int8 export.

#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/calibrate.hpp"
#include "snapuq/container.hpp"
#include "snapuq/heads.hpp"
#include "snapuq/nnet.hpp"
#include "snapuq/quantize.hpp"
#include "snapuq/scorer.hpp"
#include "snapuq/streamlab.hpp"

namespace snapuq {

struct model_bundle {
    backbone bb;
    std::vector<tap_head> heads;
    score_config score;
    id_band band;
    budget_state budget;
    nlohmann::json recipe;  // dataset regeneration parameters
    std::uint64_t train_seed = 13;
    bool has_quant = false;
    quant_bundle quant;
};

inline nlohmann::json spec_to_json(const backbone_spec& s) {
    return {{"kind", s.kind == backbone_kind::mlp ? "mlp" : "conv"},
            {"input_dim", s.input_dim},
            {"hidden", s.hidden},
            {"in_c", s.in_c},
            {"in_h", s.in_h},
            {"in_w", s.in_w},
            {"channels", s.channels},
            {"strides", s.strides},
            {"classes", s.classes},
            {"taps", s.taps}};
}

inline backbone_spec spec_from_json(const nlohmann::json& j) {
    backbone_spec s;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp")
        s.kind = backbone_kind::mlp;
    else if (kind == "conv")
        s.kind = backbone_kind::conv;
    else
        throw artifact_error("model: unknown backbone kind " + kind);
    s.input_dim = j.at("input_dim").get<std::int64_t>();
    s.hidden = j.at("hidden").get<std::vector<std::int64_t>>();
    s.in_c = j.at("in_c").get<std::int64_t>();
    s.in_h = j.at("in_h").get<std::int64_t>();
    s.in_w = j.at("in_w").get<std::int64_t>();
    s.channels = j.at("channels").get<std::vector<std::int64_t>>();
    s.strides = j.at("strides").get<std::vector<std::int64_t>>();
    s.classes = j.at("classes").get<int>();
    s.taps = j.at("taps").get<std::vector<int>>();
    s.validate();
    return s;
}

namespace detail {

inline raw_tensor pack_vec(const vec& v) {
    tensor_d t({static_cast<std::int64_t>(v.size())});
    t.data = v;
    return pack_tensor(t);
}

inline vec unpack_vec(const raw_tensor& r, std::size_t expect) {
    const tensor_d t = unpack_tensor<double>(r);
    if (t.data.size() != expect) throw artifact_error("model: vector length mismatch");
    return t.data;
}

template <typename T>
raw_tensor pack_flat(const std::vector<T>& v, std::vector<std::int64_t> shape) {
    tensor<T> t(std::move(shape));
    if (t.data.size() != v.size()) throw artifact_error("model: flat pack size mismatch");
    t.data = v;
    return pack_tensor(t);
}

}  // namespace detail

inline void save_model(const std::string& path, const model_bundle& m) {
    m.bb.spec.validate();
    container_file cf;
    nlohmann::json heads_j = nlohmann::json::array();
    for (const tap_head& h : m.heads) {
        h.validate();
        heads_j.push_back({{"tap", h.tap},
                           {"pooled", h.pooled},
                           {"density", density_name(h.density)},
                           {"nu", h.nu},
                           {"delta", h.delta},
                           {"epsilon", h.epsilon},
                           {"s_lo", h.s_lo},
                           {"s_hi", h.s_hi},
                           {"rank", h.proj_rank()},
                           {"lowrank_k", h.B.data.empty() ? 0 : h.B.dim(1)}});
    }
    nlohmann::json mapping_j;
    to_json(mapping_j, m.score.mapping);
    nlohmann::json quant_j = {{"present", m.has_quant}};
    if (m.has_quant) {
        quant_j["lut_lo"] = m.quant.lut.lo;
        quant_j["lut_hi"] = m.quant.lut.hi;
        nlohmann::json qheads = nlohmann::json::array();
        for (const quant_head& q : m.quant.heads) {
            qheads.push_back({{"tap", q.tap},
                              {"s_in", q.s_in},
                              {"s_t", q.s_t},
                              {"s_z", q.s_z},
                              {"p_scale", q.P.scale},
                              {"wmu_scale", q.w_mu.scale},
                              {"wxi_scale", q.w_xi.scale},
                              {"m_z", {{"m", q.m_z.m}, {"shift", q.m_z.shift}}},
                              {"m_mu", {{"m", q.m_mu.m}, {"shift", q.m_mu.shift}}},
                              {"final_scale", q.final_scale}});
        }
        quant_j["heads"] = qheads;
    }
    cf.manifest = {{"kind", "snapuq-model"},
                   {"format_version", 1},
                   {"backbone", spec_to_json(m.bb.spec)},
                   {"heads", heads_j},
                   {"score",
                    {{"w", m.score.w},
                     {"alpha", m.score.alpha},
                     {"temperature", m.score.temperature},
                     {"t_energy", m.score.t_energy},
                     {"mapping_fitted", m.score.mapping_fitted},
                     {"mapping", mapping_j},
                     {"maha_fitted", m.score.maha.fitted},
                     {"maha_shrinkage", m.score.maha.shrinkage}}},
                   {"band", {{"mu", m.band.mu}, {"sigma", m.band.sigma}, {"window", m.band.window}}},
                   {"budget",
                    {{"b", m.budget.b}, {"eta", m.budget.eta}, {"kappa", m.budget.kappa}, {"tau", m.budget.tau}}},
                   {"recipe", m.recipe},
                   {"train_seed", m.train_seed},
                   {"quant", quant_j}};

    for (std::size_t l = 0; l < m.bb.w.size(); ++l) {
        const std::string base = "backbone.layer" + std::to_string(l + 1);
        cf.tensors[base + ".w"] = pack_tensor(m.bb.w[l]);
        cf.tensors[base + ".b"] = detail::pack_vec(m.bb.b[l]);
    }
    cf.tensors["backbone.clf.w"] = pack_tensor(m.bb.cw);
    cf.tensors["backbone.clf.b"] = detail::pack_vec(m.bb.cb);
    for (const tap_head& h : m.heads) {
        const std::string base = "tap" + std::to_string(h.tap);
        cf.tensors[base + ".P"] = pack_tensor(h.P);
        cf.tensors[base + ".Wmu"] = pack_tensor(h.w_mu);
        cf.tensors[base + ".bmu"] = detail::pack_vec(h.b_mu);
        cf.tensors[base + ".Wxi"] = pack_tensor(h.w_xi);
        cf.tensors[base + ".bxi"] = detail::pack_vec(h.b_xi);
        if (!h.B.data.empty()) cf.tensors[base + ".B"] = pack_tensor(h.B);
    }
    if (m.score.maha.fitted) {
        for (std::size_t t = 0; t < m.heads.size(); ++t) {
            const std::string base = "maha.tap" + std::to_string(m.heads[t].tap);
            cf.tensors[base + ".mu"] = pack_tensor(m.score.maha.mu[t]);
            cf.tensors[base + ".var"] = detail::pack_vec(m.score.maha.var[t]);
        }
    }
    if (m.has_quant) {
        std::vector<std::uint16_t> lut(m.quant.lut.entries.begin(), m.quant.lut.entries.end());
        cf.tensors["quant.lut"] = detail::pack_flat(lut, {256});
        for (const quant_head& q : m.quant.heads) {
            const std::string base = "tap" + std::to_string(q.tap) + ".q";
            cf.tensors[base + ".P"] = detail::pack_flat(q.P.values, q.P.shape);
            cf.tensors[base + ".Wmu"] = detail::pack_flat(q.w_mu.values, q.w_mu.shape);
            cf.tensors[base + ".Wxi"] = detail::pack_flat(q.w_xi.values, q.w_xi.shape);
            cf.tensors[base + ".bmu"] = detail::pack_flat(q.b_mu_q, {static_cast<std::int64_t>(q.b_mu_q.size())});
            cf.tensors[base + ".bxi"] = detail::pack_flat(q.b_xi_q, {static_cast<std::int64_t>(q.b_xi_q.size())});
            cf.tensors[base + ".thresholds"] =
                detail::pack_flat(q.xi_thresholds, {static_cast<std::int64_t>(q.xi_thresholds.size())});
        }
    }
    save_container(path, cf);
}

inline model_bundle load_model(const std::string& path) {
    const container_file cf = load_container(path);
    if (cf.manifest.value("kind", "") != "snapuq-model")
        throw artifact_error("model: not a model container: " + path);
    if (cf.manifest.value("format_version", 0) != 1) throw artifact_error("model: unsupported format version");
    model_bundle m;
    m.bb.spec = spec_from_json(cf.manifest.at("backbone"));
    const std::int64_t depth = m.bb.spec.depth();
    for (std::int64_t l = 1; l <= depth; ++l) {
        const std::string base = "backbone.layer" + std::to_string(l);
        m.bb.w.push_back(unpack_tensor<double>(require_tensor(cf, base + ".w")));
        const raw_tensor& rb = require_tensor(cf, base + ".b");
        m.bb.b.push_back(unpack_tensor<double>(rb).data);
    }
    m.bb.cw = unpack_tensor<double>(require_tensor(cf, "backbone.clf.w"));
    m.bb.cb = unpack_tensor<double>(require_tensor(cf, "backbone.clf.b")).data;

    for (const auto& hj : cf.manifest.at("heads")) {
        tap_head h;
        h.tap = hj.at("tap").get<int>();
        h.pooled = hj.at("pooled").get<bool>();
        h.density = density_from_name(hj.at("density").get<std::string>());
        h.nu = hj.at("nu").get<double>();
        h.delta = hj.at("delta").get<double>();
        h.epsilon = hj.at("epsilon").get<double>();
        h.s_lo = hj.at("s_lo").get<double>();
        h.s_hi = hj.at("s_hi").get<double>();
        const std::string base = "tap" + std::to_string(h.tap);
        h.P = unpack_tensor<double>(require_tensor(cf, base + ".P"));
        h.w_mu = unpack_tensor<double>(require_tensor(cf, base + ".Wmu"));
        h.b_mu = unpack_tensor<double>(require_tensor(cf, base + ".bmu")).data;
        h.w_xi = unpack_tensor<double>(require_tensor(cf, base + ".Wxi"));
        h.b_xi = unpack_tensor<double>(require_tensor(cf, base + ".bxi")).data;
        if (cf.tensors.count(base + ".B")) h.B = unpack_tensor<double>(require_tensor(cf, base + ".B"));
        h.validate();
        m.heads.push_back(std::move(h));
    }

    const nlohmann::json& sj = cf.manifest.at("score");
    m.score.w = sj.at("w").get<std::vector<double>>();
    m.score.alpha = sj.at("alpha").get<double>();
    m.score.temperature = sj.at("temperature").get<double>();
    m.score.t_energy = sj.at("t_energy").get<double>();
    m.score.mapping_fitted = sj.at("mapping_fitted").get<bool>();
    from_json(sj.at("mapping"), m.score.mapping);
    m.score.maha.fitted = sj.at("maha_fitted").get<bool>();
    m.score.maha.shrinkage = sj.at("maha_shrinkage").get<double>();
    if (m.score.maha.fitted) {
        for (const tap_head& h : m.heads) {
            const std::string base = "maha.tap" + std::to_string(h.tap);
            m.score.maha.mu.push_back(unpack_tensor<double>(require_tensor(cf, base + ".mu")));
            m.score.maha.var.push_back(unpack_tensor<double>(require_tensor(cf, base + ".var")).data);
        }
    }

    const nlohmann::json& bj = cf.manifest.at("band");
    m.band.mu = bj.at("mu").get<double>();
    m.band.sigma = bj.at("sigma").get<double>();
    m.band.window = bj.at("window").get<std::int64_t>();
    const nlohmann::json& uj = cf.manifest.at("budget");
    m.budget.b = uj.at("b").get<double>();
    m.budget.eta = uj.at("eta").get<double>();
    m.budget.kappa = uj.at("kappa").get<double>();
    m.budget.tau = uj.at("tau").get<double>();
    m.recipe = cf.manifest.at("recipe");
    m.train_seed = cf.manifest.at("train_seed").get<std::uint64_t>();

    const nlohmann::json& qj = cf.manifest.at("quant");
    m.has_quant = qj.at("present").get<bool>();
    if (m.has_quant) {
        m.quant.lut.lo = qj.at("lut_lo").get<double>();
        m.quant.lut.hi = qj.at("lut_hi").get<double>();
        const auto lut = unpack_tensor<std::uint16_t>(require_tensor(cf, "quant.lut"));
        if (lut.data.size() != 256) throw artifact_error("model: LUT must have 256 entries");
        std::copy(lut.data.begin(), lut.data.end(), m.quant.lut.entries.begin());
        for (const auto& hj : qj.at("heads")) {
            quant_head q;
            q.tap = hj.at("tap").get<int>();
            q.s_in = hj.at("s_in").get<double>();
            q.s_t = hj.at("s_t").get<double>();
            q.s_z = hj.at("s_z").get<double>();
            q.m_z.m = hj.at("m_z").at("m").get<std::int32_t>();
            q.m_z.shift = hj.at("m_z").at("shift").get<int>();
            q.m_mu.m = hj.at("m_mu").at("m").get<std::int32_t>();
            q.m_mu.shift = hj.at("m_mu").at("shift").get<int>();
            q.final_scale = hj.at("final_scale").get<double>();
            const std::string base = "tap" + std::to_string(q.tap) + ".q";
            const auto p = unpack_tensor<std::int8_t>(require_tensor(cf, base + ".P"));
            q.P.values = p.data;
            q.P.shape = p.shape;
            q.P.scale = hj.at("p_scale").get<double>();
            const auto wm = unpack_tensor<std::int8_t>(require_tensor(cf, base + ".Wmu"));
            q.w_mu.values = wm.data;
            q.w_mu.shape = wm.shape;
            q.w_mu.scale = hj.at("wmu_scale").get<double>();
            const auto wx = unpack_tensor<std::int8_t>(require_tensor(cf, base + ".Wxi"));
            q.w_xi.values = wx.data;
            q.w_xi.shape = wx.shape;
            q.w_xi.scale = hj.at("wxi_scale").get<double>();
            q.b_mu_q = unpack_tensor<std::int32_t>(require_tensor(cf, base + ".bmu")).data;
            q.b_xi_q = unpack_tensor<std::int32_t>(require_tensor(cf, base + ".bxi")).data;
            q.xi_thresholds = unpack_tensor<std::int32_t>(require_tensor(cf, base + ".thresholds")).data;
            if (q.xi_thresholds.size() != 255) throw artifact_error("model: threshold table must have 255 entries");
            q.dim = static_cast<std::int64_t>(q.b_mu_q.size());
            q.rank = q.w_mu.shape.size() == 2 ? q.w_mu.shape[1] : 0;
            q.prev_dim = q.P.shape.size() == 2 ? q.P.shape[1] : 0;
            m.quant.heads.push_back(std::move(q));
        }
    }
    return m;
}

// Rebuild the datasets a model was trained on from its embedded recipe.
inline task_data regenerate_task(const nlohmann::json& recipe) {
    const std::string task = recipe.at("task").get<std::string>();
    const std::uint64_t seed = recipe.at("data_seed").get<std::uint64_t>();
    const std::int64_t n_train = recipe.at("n_train").get<std::int64_t>();
    const std::int64_t n_dev = recipe.at("n_dev").get<std::int64_t>();
    const std::int64_t n_id = recipe.at("n_id_pool").get<std::int64_t>();
    const std::int64_t n_ood = recipe.at("n_ood_pool").get<std::int64_t>();
    if (task == "vector") return make_vector_task(seed, n_train, n_dev, n_id, n_ood);
    if (task == "glyph") return make_glyph_task(seed, n_train, n_dev, n_id, n_ood);
    throw config_error("unknown task: " + task);
}

}  // namespace snapuq
