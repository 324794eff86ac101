#pragma once

// Command implementations behind the snapuq binary. Every command reads a
// flat key=value config (file plus flag overrides), funnels all randomness
// through recorded seeds, writes its outputs plus a run manifest into the
// output directory, and is idempotent given identical inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/config.hpp"
#include "snapuq/metrics.hpp"
#include "snapuq/model.hpp"
#include "snapuq/selftest.hpp"
#include "snapuq/trainer.hpp"

namespace snapuq {

inline std::string manifest_dir_for(const std::string& out_path) {
    const std::string dir = std::filesystem::path(out_path).parent_path().string();
    return dir.empty() ? std::string(".") : dir;
}

inline backbone_spec spec_for_task(const std::string& task) {
    if (task == "vector") return default_mlp_spec(16, 4);
    if (task == "glyph") return default_conv_spec(4);
    throw config_error("unknown task: " + task + " (expected vector or glyph)");
}

inline nlohmann::json recipe_from_config(const kv_config& cfg) {
    const std::string task = cfg.get_str("task", "vector");
    const bool vec_task = task == "vector";
    return {{"task", task},
            {"data_seed", cfg.get_u64("data_seed", 42)},
            {"n_train", cfg.get_int("n_train", vec_task ? 1200 : 800)},
            {"n_dev", cfg.get_int("n_dev", vec_task ? 400 : 240)},
            {"n_id_pool", cfg.get_int("n_id_pool", vec_task ? 1500 : 1000)},
            {"n_ood_pool", cfg.get_int("n_ood_pool", vec_task ? 400 : 300)}};
}

inline std::vector<tap_head> build_heads(const kv_config& cfg, const backbone_spec& spec, std::uint64_t seed) {
    const density_kind density = density_from_name(cfg.get_str("density", "diag_gauss"));
    check_arg(density != density_kind::lowrank, "config: lowrank heads are score-only and cannot be trained");
    std::vector<tap_head> heads;
    for (int tap : spec.taps) {
        std::int64_t r;
        if (spec.kind == backbone_kind::mlp)
            r = cfg.get_int("rank", 16);
        else
            r = cfg.get_int("rank_tap" + std::to_string(tap), tap == 2 ? 8 : 16);
        check_arg(r >= 1, "config: head rank must be positive");
        tap_head h = init_head(tap, spec.layer_width(tap - 1), spec.layer_width(tap), r,
                               spec.kind == backbone_kind::conv, seed, density);
        h.nu = cfg.get_double("nu", 4.0);
        h.delta = cfg.get_double("delta", 1.0);
        heads.push_back(std::move(h));
    }
    return heads;
}

inline train_config train_config_from(const kv_config& cfg, const backbone_spec& spec, std::size_t n_taps) {
    train_config tc = default_train_config(spec);
    const std::string opt = cfg.get_str("optimizer", "");
    if (opt == "adam")
        tc.opt = optimizer_kind::adam;
    else if (opt == "sgd")
        tc.opt = optimizer_kind::sgd_momentum;
    else if (!opt.empty())
        throw config_error("config: unknown optimizer " + opt);
    tc.lr = cfg.get_double("lr", tc.lr);
    tc.lr_min = cfg.get_double("lr_min", tc.lr_min);
    tc.epochs = static_cast<int>(cfg.get_int("epochs", 6));
    tc.batch_size = static_cast<int>(cfg.get_int("batch", 64));
    tc.lambda_ss = cfg.get_double("lambda_ss", tc.lambda_ss);
    tc.lambda_reg = cfg.get_double("lambda_reg", tc.lambda_reg);
    tc.alpha_var = cfg.get_double("alpha_var", tc.alpha_var);
    tc.alpha_wd = cfg.get_double("alpha_wd", tc.alpha_wd);
    tc.detach = cfg.get_bool("detach", false);
    tc.detach_patience = static_cast<int>(cfg.get_int("detach_patience", 0));
    const std::string balance = cfg.get_str("balance", "off");
    if (balance == "adaptive")
        tc.balance.adaptive = true;
    else if (balance != "off")
        throw config_error("config: balance must be off or adaptive");
    tc.balance.rho_star = cfg.get_double("rho_star", tc.balance.rho_star);
    tc.balance.lambda_min = cfg.get_double("lambda_min", tc.balance.lambda_min);
    tc.balance.lambda_max = cfg.get_double("lambda_max", tc.balance.lambda_max);
    tc.warmup_frac = cfg.get_double("warmup_frac", tc.warmup_frac);
    tc.clip_norm = cfg.get_double("clip", tc.clip_norm);
    tc.xi_clip = cfg.get_double("xi_clip", tc.xi_clip);
    tc.eta_g = cfg.get_double("eta_g", tc.eta_g);
    tc.seed = cfg.get_u64("seed", 13);
    tc.validate(n_taps);
    return tc;
}

inline stream_spec stream_spec_from(const kv_config& cfg) {
    stream_spec sp;
    if (cfg.get_bool("paper_scale", false)) sp.set_paper_scale();
    sp.seed = cfg.get_u64("stream_seed", 99);
    sp.id_len = cfg.get_int("id_len", sp.id_len);
    sp.cid_len = cfg.get_int("cid_len", sp.cid_len);
    sp.ood_len = cfg.get_int("ood_len", sp.ood_len);
    sp.window = cfg.get_int("window", sp.window);
    sp.cycle = cfg.get_int("cycle", sp.cycle);
    sp.validate();
    return sp;
}

inline int cmd_train(const kv_config& cfg) {
    const std::string out = cfg.require_str("out");
    wall_timer timer;
    const std::string task = cfg.get_str("task", "vector");
    const backbone_spec spec = spec_for_task(task);
    const nlohmann::json recipe = recipe_from_config(cfg);
    const task_data td = regenerate_task(recipe);
    const std::uint64_t seed = cfg.get_u64("seed", 13);

    model_bundle m;
    m.bb = init_backbone(spec, seed);
    if (cfg.get_str("heads", "on") == "on") m.heads = build_heads(cfg, spec, seed);
    m.train_seed = seed;
    m.recipe = recipe;

    train_config tc = train_config_from(cfg, spec, m.heads.size());
    const train_result tr = train(m.bb, m.heads, tc, td.train.xs, td.train.ys);

    m.score.w.assign(m.heads.size(), m.heads.empty() ? 0.0 : 1.0 / static_cast<double>(m.heads.size()));
    m.score.alpha = cfg.get_double("alpha", 0.5);
    m.score.t_energy = cfg.get_double("t_energy", 1.0);

    std::filesystem::create_directories(out);
    const std::string model_path = (std::filesystem::path(out) / "model.snapuq").string();
    save_model(model_path, m);
    const std::string log_path = (std::filesystem::path(out) / "train_log.jsonl").string();
    {
        std::ofstream lf(log_path);
        if (!lf) throw artifact_error("train: cannot open " + log_path);
        for (const train_log_entry& e : tr.log) {
            nlohmann::json j;
            to_json(j, e);
            lf << j.dump() << "\n";
        }
    }

    run_manifest man;
    man.command = "train";
    man.config_hash = cfg.hash();
    man.seed = seed;
    man.outputs = {model_path, log_path};
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(out, man);

    const train_log_entry& last = tr.log.back();
    std::cout << "trained " << task << " model: epochs=" << tc.epochs << " clf_loss=" << last.loss_clf
              << " ss_loss=" << last.loss_ss << " lambda_ss=" << tr.final_lambda << "\n";
    std::cout << "wrote " << model_path << "\n";
    return 0;
}

inline int cmd_calibrate(const kv_config& cfg) {
    const std::string model_path = cfg.require_str("model");
    const std::string out_path = cfg.get_str("out", model_path);
    wall_timer timer;
    model_bundle m = load_model(model_path);
    if (m.heads.empty()) throw config_error("calibrate: model has no tap heads");
    const task_data td = regenerate_task(m.recipe);

    std::vector<activation_trace> traces;
    traces.reserve(td.dev.xs.size());
    for (const tensor_d& x : td.dev.xs) traces.push_back(forward_collect(m.bb, x));

    const layer_weight_fit lw = fit_layer_weights(m.bb, m.heads, td.dev.xs);
    m.score.w = lw.w;
    if (lw.uniform_fallback) std::cout << "warning: zero-variance tap surprisals, using uniform weights\n";

    if (cfg.get_bool("fit_temperature", true)) {
        std::vector<vec> logits;
        logits.reserve(traces.size());
        for (const auto& t : traces) logits.push_back(t.logits);
        m.score.temperature = fit_temperature(logits, td.dev.ys);
    }
    m.score.alpha = cfg.get_double("alpha", m.score.alpha);
    m.score.t_energy = cfg.get_double("t_energy", m.score.t_energy);

    std::vector<double> S(traces.size()), conf_m(traces.size());
    std::vector<int> err(traces.size());
    {
        score_config probe = m.score;
        probe.mapping_fitted = false;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            const score_record rec = score_trace(m.heads, probe, traces[i]);
            S[i] = rec.S;
            conf_m[i] = rec.m;
            err[i] = rec.yhat == td.dev.ys[i] ? 0 : 1;
        }
    }

    const std::string mapping = cfg.get_str("mapping", "logistic");
    const double gamma = cfg.get_double("gamma", 1.0);
    if (mapping == "logistic") {
        const bool label_free = cfg.get_bool("label_free", false);
        const logistic_fit fit = fit_logistic(S, conf_m, err, label_free);
        m.score.mapping.kind = mapping_kind::logistic;
        m.score.mapping.beta0 = fit.beta0;
        m.score.mapping.beta1 = fit.beta1;
        m.score.mapping.beta2 = fit.beta2;
        m.score.mapping.breakpoints.clear();
        m.score.mapping.values.clear();
    } else if (mapping == "isotonic") {
        std::vector<double> psi(S.size());
        for (std::size_t i = 0; i < S.size(); ++i) psi[i] = gamma * S[i] + (1.0 - gamma) * conf_m[i];
        m.score.mapping = fit_isotonic_pav(psi, err, gamma);
    } else {
        throw config_error("calibrate: mapping must be logistic or isotonic");
    }
    m.score.mapping.gamma = gamma;
    m.score.mapping_fitted = true;

    std::vector<double> u(S.size());
    for (std::size_t i = 0; i < S.size(); ++i) u[i] = eval_mapping(m.score.mapping, S[i], conf_m[i]);
    if (cfg.has("coverage")) {
        m.score.mapping.tau = select_threshold_coverage(u, cfg.get_double("coverage", 0.9));
    } else {
        m.score.mapping.tau = select_threshold_f1(u, err);
    }
    m.score.mapping.dev_hash = fnv1a64(m.recipe.dump());
    m.score.mapping.fitted_date = cfg.get_str("date", "");

    const std::int64_t window = cfg.get_int("window", 20);
    const std::int64_t band_len = cfg.get_int("id_band_len", 400);
    check_arg(band_len >= window, "calibrate: id_band_len shorter than window");
    {
        rng g = rng(m.recipe.at("data_seed").get<std::uint64_t>()).split(0x1DBA4Dull);
        std::vector<int> correct;
        correct.reserve(static_cast<std::size_t>(band_len));
        for (std::int64_t i = 0; i < band_len; ++i) {
            const std::int64_t j = g.below(static_cast<std::int64_t>(td.id_pool.xs.size()));
            const activation_trace t = forward_collect(m.bb, td.id_pool.xs[static_cast<std::size_t>(j)]);
            std::size_t arg = 0;
            for (std::size_t c = 1; c < t.post.size(); ++c)
                if (t.post[c] > t.post[arg]) arg = c;
            correct.push_back(static_cast<int>(arg) == td.id_pool.ys[static_cast<std::size_t>(j)] ? 1 : 0);
        }
        m.band = estimate_id_band(correct, window);
    }

    if (cfg.get_bool("maha", true))
        m.score.maha = fit_mahalanobis(m.bb, m.heads, td.train.xs, td.train.ys,
                                       cfg.get_double("shrinkage", 1e-4));

    m.budget.b = cfg.get_double("budget_b", m.budget.b);
    m.budget.eta = cfg.get_double("budget_eta", m.budget.eta);
    m.budget.kappa = cfg.get_double("budget_kappa", m.budget.kappa);
    m.budget.tau = m.score.mapping.tau;

    save_model(out_path, m);

    run_manifest man;
    man.command = "calibrate";
    man.config_hash = cfg.hash();
    man.seed = m.train_seed;
    man.inputs = {model_path};
    man.outputs = {out_path};
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(manifest_dir_for(out_path), man);

    std::cout << "temperature T=" << m.score.temperature << " tau=" << m.score.mapping.tau << " w=[";
    for (std::size_t i = 0; i < m.score.w.size(); ++i) std::cout << (i ? ", " : "") << m.score.w[i];
    std::cout << "] band mu=" << m.band.mu << " sigma=" << m.band.sigma << "\n";
    if (mapping == "logistic")
        std::cout << "logistic beta=(" << m.score.mapping.beta0 << ", " << m.score.mapping.beta1 << ", "
                  << m.score.mapping.beta2 << ")\n";
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

inline int cmd_quantize(const kv_config& cfg) {
    const std::string model_path = cfg.require_str("model");
    const std::string out_path = cfg.get_str("out", model_path);
    wall_timer timer;
    model_bundle m = load_model(model_path);
    if (m.heads.empty()) throw config_error("quantize: model has no tap heads");
    const task_data td = regenerate_task(m.recipe);
    m.quant = quantize_heads(m.bb, m.heads, td.dev.xs);
    m.has_quant = true;
    save_model(out_path, m);

    const overhead_report rep = report_overhead(m.bb.spec, m.heads);
    std::cout << "head params:";
    for (std::size_t i = 0; i < rep.params_per_tap.size(); ++i)
        std::cout << " tap" << m.heads[i].tap << "=" << rep.params_per_tap[i];
    std::cout << " total=" << rep.head_params << " rho=" << rep.rho << "\n";
    for (const quant_head& q : m.quant.heads)
        std::cout << "tap" << q.tap << " scales: in=" << q.s_in << " t=" << q.s_t << " z=" << q.s_z << "\n";

    run_manifest man;
    man.command = "quantize";
    man.config_hash = cfg.hash();
    man.seed = m.train_seed;
    man.inputs = {model_path};
    man.outputs = {out_path};
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(manifest_dir_for(out_path), man);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

inline int cmd_stream(const kv_config& cfg) {
    const std::string out = cfg.require_str("out");
    wall_timer timer;
    const nlohmann::json recipe = recipe_from_config(cfg);
    const task_data td = regenerate_task(recipe);
    const stream_spec sp = stream_spec_from(cfg);
    const labeled_stream st = build_stream(sp, td.id_pool, td.ood_pool);

    std::filesystem::create_directories(out);
    const std::string prefix = (std::filesystem::path(out) / cfg.get_str("name", "stream")).string();
    write_stream(prefix, st);

    run_manifest man;
    man.command = "stream";
    man.config_hash = cfg.hash();
    man.seed = sp.seed;
    man.outputs = {prefix + ".frames", prefix + ".truth.json"};
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(out, man);
    std::cout << "wrote " << st.inputs.size() << " frames to " << prefix << ".frames\n";
    return 0;
}

namespace detail {

inline nlohmann::json record_to_json(const score_record& r, const std::string& engine) {
    nlohmann::json j = {{"frame", r.frame}, {"ebar", r.ebar},   {"S", r.S},
                        {"m", r.m},         {"U", r.U},         {"yhat", r.yhat},
                        {"conf", r.conf},   {"margin", r.margin}, {"msp", r.msp},
                        {"entropy", r.entropy}, {"energy", r.energy}, {"post", r.post},
                        {"abstain", r.abstain}, {"overflow", r.overflow}, {"engine", engine}};
    if (r.maha.has_value())
        j["maha"] = *r.maha;
    else
        j["maha"] = nullptr;
    return j;
}

}  // namespace detail

inline int cmd_score(const kv_config& cfg) {
    const std::string model_path = cfg.require_str("model");
    const std::string stream_prefix = cfg.require_str("stream");
    const std::string out = cfg.require_str("out");
    const std::string engine = cfg.get_str("engine", "float");
    check_arg(engine == "float" || engine == "int8", "score: engine must be float or int8");
    wall_timer timer;

    model_bundle m = load_model(model_path);
    if (m.heads.empty()) throw config_error("score: model has no tap heads");
    if (!m.score.mapping_fitted) throw config_error("score: model is not calibrated; run calibrate first");
    if (engine == "int8" && !m.has_quant)
        throw artifact_error("score: engine int8 requested but the container has no quantized bundle");
    const std::string baseline = cfg.get_str("baseline", "");
    if (!baseline.empty() && baseline != "msp" && baseline != "entropy" && baseline != "energy" &&
        baseline != "maha")
        throw config_error("score: baseline must be one of msp, entropy, energy, maha");
    const bool with_maha = m.score.maha.fitted;
    if (baseline == "maha" && !with_maha)
        throw artifact_error("score: maha baseline requested but the container has no fitted statistics");

    const labeled_stream st = read_stream(stream_prefix, false);
    const std::vector<std::int64_t> expect_shape = m.bb.spec.kind == backbone_kind::mlp
                                                       ? std::vector<std::int64_t>{m.bb.spec.input_dim}
                                                       : std::vector<std::int64_t>{m.bb.spec.in_c, m.bb.spec.in_h,
                                                                                   m.bb.spec.in_w};
    if (st.inputs.empty() || st.inputs.front().shape != expect_shape)
        throw artifact_error("score: stream frame shape does not match the model input");

    std::optional<budget_state> budget;
    if (cfg.has("budget_b")) {
        budget = m.budget;
        budget->b = cfg.get_double("budget_b", budget->b);
        budget->tau = m.score.mapping.tau;
    }
    const double tau = cfg.get_double("tau", m.score.mapping.tau);

    std::filesystem::create_directories(out);
    const std::string scores_path = (std::filesystem::path(out) / ("scores_" + engine + ".jsonl")).string();
    std::ofstream sf(scores_path);
    if (!sf) throw artifact_error("score: cannot open " + scores_path);

    std::size_t n_abstain = 0, n_overflow = 0;
    for (std::size_t i = 0; i < st.inputs.size(); ++i) {
        const activation_trace trc = forward_collect(m.bb, st.inputs[i]);
        score_record rec = score_trace(m.heads, m.score, trc, with_maha);
        rec.frame = static_cast<std::int64_t>(i);
        if (engine == "int8") {
            const std::vector<quant_score> qs = quantized_tap_ebars(m.quant, trc);
            for (std::size_t t = 0; t < qs.size(); ++t) {
                rec.ebar[t] = qs[t].ebar;
                rec.overflow = rec.overflow || qs[t].overflow;
            }
            rec.S = snap_score(rec.ebar, m.score.w);
            rec.U = map_uncertainty(m.score, rec.S, rec.m);
        }
        const decision d = decide(rec.U, budget ? budget->tau : tau, budget);
        rec.abstain = d.abstain;
        if (d.budget) budget = d.budget;
        if (rec.abstain) ++n_abstain;
        if (rec.overflow) ++n_overflow;
        sf << detail::record_to_json(rec, engine).dump() << "\n";
    }
    if (!sf) throw artifact_error("score: short write on " + scores_path);
    sf.close();

    run_manifest man;
    man.command = "score";
    man.config_hash = cfg.hash();
    man.seed = m.train_seed;
    man.inputs = {model_path, stream_prefix + ".frames"};
    man.outputs = {scores_path};
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(out, man);

    std::cout << "scored " << st.inputs.size() << " frames (" << engine << "), abstain rate "
              << static_cast<double>(n_abstain) / static_cast<double>(st.inputs.size());
    if (n_overflow > 0) std::cout << ", overflow frames " << n_overflow;
    std::cout << "\nwrote " << scores_path << "\n";
    return 0;
}

namespace detail {

struct score_table {
    std::vector<double> S, U, m, msp, entropy, energy;
    std::vector<std::optional<double>> maha;
    std::vector<int> yhat;
    std::vector<vec> post;
};

inline score_table read_scores(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw artifact_error("report: cannot open " + path);
    score_table t;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw artifact_error("report: bad JSON line in " + path);
        t.S.push_back(j.at("S").get<double>());
        t.U.push_back(j.at("U").get<double>());
        t.m.push_back(j.at("m").get<double>());
        t.msp.push_back(j.at("msp").get<double>());
        t.entropy.push_back(j.at("entropy").get<double>());
        t.energy.push_back(j.at("energy").get<double>());
        t.yhat.push_back(j.at("yhat").get<int>());
        t.post.push_back(j.at("post").get<vec>());
        if (j.at("maha").is_null())
            t.maha.emplace_back();
        else
            t.maha.emplace_back(j.at("maha").get<double>());
    }
    if (t.S.empty()) throw artifact_error("report: no records in " + path);
    return t;
}

template <typename F>
nlohmann::json guarded(F&& f) {
    try {
        return f();
    } catch (const std::exception& e) {
        return {{"error", e.what()}};
    }
}

}  // namespace detail

inline int cmd_report(const kv_config& cfg) {
    const std::string scores_path = cfg.require_str("scores");
    const std::string stream_prefix = cfg.require_str("stream");
    const std::string model_path = cfg.require_str("model");
    const std::string out = cfg.require_str("out");
    wall_timer timer;

    const detail::score_table tab = detail::read_scores(scores_path);
    const labeled_stream st = read_stream(stream_prefix, true);
    if (st.truth.size() != tab.S.size())
        throw artifact_error("report: score and stream lengths disagree");
    const model_bundle m = load_model(model_path);
    if (m.band.window <= 0) throw config_error("report: model has no ID band; run calibrate first");

    const std::size_t n = tab.S.size();
    std::vector<int> correct(n, 0);
    std::vector<int> clean_id(n, 0);
    std::vector<int> has_label(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const frame_truth& ft = st.truth[i];
        correct[i] = ft.label >= 0 && tab.yhat[i] == ft.label ? 1 : 0;
        clean_id[i] = ft.regime == regime_kind::id ? 1 : 0;
        has_label[i] = ft.label >= 0 ? 1 : 0;
    }
    const std::vector<event_interval> events = label_events(correct, m.band.window, m.band.mu, m.band.sigma);
    const std::vector<int> ev_mask = event_frame_mask(n, events);
    const double tau = m.score.mapping.tau;

    const int n_boot = static_cast<int>(cfg.get_int("bootstrap", 1000));
    const std::uint64_t boot_seed = cfg.get_u64("bootstrap_seed", 2026);
    const auto frame_metric_ci = [&](const std::vector<double>& scores,
                                     const std::function<double(const std::vector<double>&, const std::vector<int>&)>& fn) {
        return bootstrap_ci(
            n,
            [&](const std::vector<std::int64_t>& idx) {
                std::vector<double> s;
                std::vector<int> l;
                s.reserve(idx.size());
                l.reserve(idx.size());
                for (std::int64_t i : idx) {
                    s.push_back(scores[static_cast<std::size_t>(i)]);
                    l.push_back(ev_mask[static_cast<std::size_t>(i)]);
                }
                return fn(s, l);
            },
            n_boot, boot_seed);
    };
    const auto ci_json = [](const ci_result& c) {
        return nlohmann::json{{"point", c.point}, {"lo", c.lo}, {"hi", c.hi}, {"widened", c.widened}};
    };

    nlohmann::json rep;
    rep["frames"] = n;
    rep["events"] = events.size();
    rep["tau"] = tau;
    rep["band"] = {{"mu", m.band.mu}, {"sigma", m.band.sigma}, {"window", m.band.window}};

    rep["auprc"] = detail::guarded([&] {
        return ci_json(frame_metric_ci(tab.U, [](const std::vector<double>& s, const std::vector<int>& l) {
            return frame_auprc(s, l);
        }));
    });
    rep["auprc_event_weighted"] = detail::guarded([&] {
        const std::vector<double> w = event_weights(n, events);
        return nlohmann::json(frame_auprc(tab.U, ev_mask, w));
    });
    rep["auroc"] = detail::guarded([&] {
        return ci_json(frame_metric_ci(tab.U, [](const std::vector<double>& s, const std::vector<int>& l) {
            return auroc(s, l);
        }));
    });

    rep["delay"] = detail::guarded([&] {
        const delay_result dr = delay_at_threshold(events, tab.U, tau);
        nlohmann::json j = {{"median", dr.median_delay}, {"miss_rate", dr.miss_rate},
                            {"per_event", dr.per_event}};
        if (!events.empty()) {
            const ci_result ci = bootstrap_ci(
                events.size(),
                [&](const std::vector<std::int64_t>& idx) {
                    std::vector<double> ds;
                    for (std::int64_t i : idx) {
                        const double d = dr.per_event[static_cast<std::size_t>(i)];
                        if (!std::isnan(d)) ds.push_back(d);
                    }
                    if (ds.empty()) return std::numeric_limits<double>::quiet_NaN();
                    std::sort(ds.begin(), ds.end());
                    const std::size_t k = ds.size();
                    return k % 2 ? ds[k / 2] : 0.5 * (ds[k / 2 - 1] + ds[k / 2]);
                },
                n_boot, boot_seed);
            j["median_ci"] = ci_json(ci);
        }
        return j;
    });

    rep["fpr_at_matched_recall"] = detail::guarded([&] {
        return nlohmann::json(fpr_at_matched_recall(tab.U, ev_mask, clean_id, cfg.get_double("recall_target", 0.95)));
    });

    rep["risk_coverage"] = detail::guarded([&] {
        const rc_result rc = risk_coverage(tab.U, correct);
        nlohmann::json pts = nlohmann::json::array();
        for (const rc_point& p : rc.table)
            pts.push_back({{"target", p.target}, {"tau", p.tau}, {"coverage", p.coverage},
                           {"risk", p.risk}, {"skipped", p.skipped}});
        return nlohmann::json{{"aurc", rc.aurc}, {"any_skipped", rc.any_skipped}, {"points", pts}};
    });

    rep["calibration"] = detail::guarded([&] {
        std::vector<vec> posts;
        std::vector<int> labels;
        for (std::size_t i = 0; i < n; ++i) {
            if (!has_label[i]) continue;
            posts.push_back(tab.post[i]);
            labels.push_back(st.truth[i].label);
        }
        const calib_result c = calib_metrics(posts, labels);
        return nlohmann::json{{"nll", c.nll}, {"brier", c.brier}, {"ece", c.ece}};
    });

    rep["selective_nll"] = detail::guarded([&] {
        std::vector<vec> posts;
        std::vector<int> labels;
        std::vector<double> u;
        for (std::size_t i = 0; i < n; ++i) {
            if (!has_label[i]) continue;
            posts.push_back(tab.post[i]);
            labels.push_back(st.truth[i].label);
            u.push_back(tab.U[i]);
        }
        return nlohmann::json(selective_nll(posts, labels, u, tau));
    });

    nlohmann::json baselines = nlohmann::json::object();
    const auto baseline_entry = [&](const std::string& name, const std::vector<double>& scores) {
        baselines[name] = detail::guarded([&] {
            return nlohmann::json{{"auprc", frame_auprc(scores, ev_mask)}, {"auroc", auroc(scores, ev_mask)}};
        });
    };
    baseline_entry("msp", tab.msp);
    baseline_entry("entropy", tab.entropy);
    baseline_entry("energy", tab.energy);
    {
        bool all_maha = true;
        std::vector<double> mh;
        for (const auto& v : tab.maha) {
            if (!v.has_value()) {
                all_maha = false;
                break;
            }
            mh.push_back(*v);
        }
        if (all_maha) baseline_entry("maha", mh);
    }
    rep["baselines"] = baselines;

    std::optional<severity_series> sev;
    rep["severity_auprc"] = detail::guarded([&] {
        sev = severity_auprc_series(tab.U, st.truth, ev_mask);
        return nlohmann::json{{"series", sev->auprc}, {"degenerate_s0", sev->degenerate_s0}};
    });

    if (cfg.has("scores_int8")) {
        const detail::score_table qtab = detail::read_scores(cfg.require_str("scores_int8"));
        rep["int8_check"] = detail::guarded([&] {
            if (qtab.S.size() != tab.S.size()) throw artifact_error("report: int8 score length mismatch");
            const double rho = spearman(tab.S, qtab.S);
            return nlohmann::json{{"spearman_S", rho}, {"pass", rho >= 0.99}};
        });
    }

    std::filesystem::create_directories(out);
    const std::string report_path = (std::filesystem::path(out) / "report.json").string();
    {
        std::ofstream rf(report_path);
        if (!rf) throw artifact_error("report: cannot open " + report_path);
        rf << rep.dump(2) << "\n";
    }
    std::vector<std::string> outputs = {report_path};
    {
        const std::string pr_path = (std::filesystem::path(out) / "pr_points.csv").string();
        std::ofstream pf(pr_path);
        pf << "threshold,precision,recall\n";
        try {
            for (const pr_row& r : pr_curve(tab.U, ev_mask))
                pf << r.threshold << "," << r.precision << "," << r.recall << "\n";
        } catch (const std::exception&) {
        }
        outputs.push_back(pr_path);
    }
    {
        const std::string roc_path = (std::filesystem::path(out) / "roc_points.csv").string();
        std::ofstream rf(roc_path);
        rf << "threshold,fpr,tpr\n";
        try {
            for (const roc_row& r : roc_curve(tab.U, ev_mask))
                rf << r.threshold << "," << r.fpr << "," << r.tpr << "\n";
        } catch (const std::exception&) {
        }
        outputs.push_back(roc_path);
    }
    if (sev.has_value()) {
        const std::string sev_path = (std::filesystem::path(out) / "severity_series.csv").string();
        std::ofstream sf(sev_path);
        sf << "severity,auprc\n";
        for (std::size_t s = 0; s < sev->auprc.size(); ++s) sf << s << "," << sev->auprc[s] << "\n";
        outputs.push_back(sev_path);
    }

    run_manifest man;
    man.command = "report";
    man.config_hash = cfg.hash();
    man.seed = boot_seed;
    man.inputs = {scores_path, stream_prefix + ".frames", model_path};
    man.outputs = outputs;
    man.wall_seconds = timer.seconds();
    man.config = nlohmann::json::object();
    for (const auto& [k, v] : cfg.values) man.config[k] = v;
    write_manifest(out, man);

    std::cout << "events: " << events.size() << "\n";
    if (rep["auprc"].contains("point"))
        std::cout << "AUPRC " << rep["auprc"]["point"].get<double>() << "\n";
    std::cout << "wrote " << report_path << "\n";
    return 0;
}

inline int cmd_selftest() {
    const std::vector<check_result> results = run_selftests();
    bool all = true;
    for (const check_result& r : results) {
        std::cout << (r.pass ? "ok   " : "FAIL ") << r.name << " - " << r.detail << "\n";
        all = all && r.pass;
    }
    if (!all) {
        std::cout << "selftest: failures detected\n";
        return 3;
    }
    std::cout << "selftest: all checks passed\n";
    return 0;
}

}  // namespace snapuq
