// Command line front end. Every subcommand takes a key=value config file
// plus repeatable --set overrides; the dedicated flags below are shorthand
// for the most common keys and win over both.

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "snapuq/cli.hpp"

namespace {

struct common_opts {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, common_opts& o) {
    cmd->add_option("--config", o.config_path, "key=value configuration file");
    cmd->add_option("--set", o.overrides, "config override key=value (repeatable)")->type_name("KEY=VALUE");
}

snapuq::kv_config make_config(const common_opts& o,
                              const std::vector<std::pair<std::string, std::string>>& extra) {
    snapuq::kv_config cfg;
    if (!o.config_path.empty()) cfg = snapuq::load_config(o.config_path);
    snapuq::apply_overrides(cfg, o.overrides);
    for (const auto& [k, v] : extra) cfg.set(k, v);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-pass activation-surprisal uncertainty toolkit"};
    app.set_version_flag("--version", snapuq::tool_version);
    app.require_subcommand(1);

    common_opts train_o, calib_o, quant_o, stream_o, score_o, report_o;

    CLI::App* train = app.add_subcommand("train", "train a backbone with tap heads");
    add_common(train, train_o);
    std::string train_out, train_task;
    std::int64_t train_seed = 0, train_epochs = 0;
    train->add_option("--out", train_out, "output directory");
    train->add_option("--task", train_task, "vector or glyph");
    CLI::Option* train_seed_opt = train->add_option("--seed", train_seed, "training seed");
    CLI::Option* train_epochs_opt = train->add_option("--epochs", train_epochs, "epoch count");

    CLI::App* calib = app.add_subcommand("calibrate", "fit weights, temperature, mapping and threshold");
    add_common(calib, calib_o);
    std::string calib_model, calib_out, calib_mapping;
    double calib_gamma = 1.0;
    bool calib_label_free = false;
    calib->add_option("--model", calib_model, "model container to calibrate");
    calib->add_option("--out", calib_out, "output container path (default: rewrite in place)");
    calib->add_option("--mapping", calib_mapping, "logistic or isotonic");
    CLI::Option* calib_gamma_opt = calib->add_option("--gamma", calib_gamma, "isotonic feature blend weight");
    calib->add_flag("--label-free", calib_label_free, "fit the logistic map without the confidence term");

    CLI::App* quant = app.add_subcommand("quantize", "export int8 heads into the container");
    add_common(quant, quant_o);
    std::string quant_model, quant_out;
    quant->add_option("--model", quant_model, "model container to quantize");
    quant->add_option("--out", quant_out, "output container path (default: rewrite in place)");

    CLI::App* stream = app.add_subcommand("stream", "build a drift stream with truth sidecar");
    add_common(stream, stream_o);
    std::string stream_out, stream_name;
    bool stream_paper = false;
    std::int64_t stream_seed = 0;
    stream->add_option("--out", stream_out, "output directory");
    stream->add_option("--name", stream_name, "stream file basename");
    stream->add_flag("--paper-scale", stream_paper, "use the long segment lengths");
    CLI::Option* stream_seed_opt = stream->add_option("--seed", stream_seed, "stream seed");

    CLI::App* score = app.add_subcommand("score", "score a stream with a calibrated model");
    add_common(score, score_o);
    std::string score_model, score_stream, score_out, score_engine, score_baseline;
    double score_tau = 0.0;
    score->add_option("--model", score_model, "calibrated model container");
    score->add_option("--stream", score_stream, "stream path prefix");
    score->add_option("--out", score_out, "output directory");
    score->add_option("--engine", score_engine, "float or int8");
    score->add_option("--baseline", score_baseline, "msp, entropy, energy or maha");
    CLI::Option* score_tau_opt = score->add_option("--tau", score_tau, "abstention threshold override");

    CLI::App* report = app.add_subcommand("report", "evaluate scores against stream truth");
    add_common(report, report_o);
    std::string rep_scores, rep_stream, rep_model, rep_out, rep_int8;
    report->add_option("--scores", rep_scores, "scores JSONL from the score command");
    report->add_option("--stream", rep_stream, "stream path prefix");
    report->add_option("--model", rep_model, "model container with band and threshold");
    report->add_option("--out", rep_out, "output directory");
    report->add_option("--scores-int8", rep_int8, "int8 scores JSONL for the dual-engine check");

    CLI::App* selftest = app.add_subcommand("selftest", "run the built-in numerical checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(train)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!train_out.empty()) extra.emplace_back("out", train_out);
            if (!train_task.empty()) extra.emplace_back("task", train_task);
            if (train_seed_opt->count()) extra.emplace_back("seed", std::to_string(train_seed));
            if (train_epochs_opt->count()) extra.emplace_back("epochs", std::to_string(train_epochs));
            return snapuq::cmd_train(make_config(train_o, extra));
        }
        if (app.got_subcommand(calib)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!calib_model.empty()) extra.emplace_back("model", calib_model);
            if (!calib_out.empty()) extra.emplace_back("out", calib_out);
            if (!calib_mapping.empty()) extra.emplace_back("mapping", calib_mapping);
            if (calib_gamma_opt->count()) extra.emplace_back("gamma", std::to_string(calib_gamma));
            if (calib_label_free) extra.emplace_back("label_free", "true");
            return snapuq::cmd_calibrate(make_config(calib_o, extra));
        }
        if (app.got_subcommand(quant)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!quant_model.empty()) extra.emplace_back("model", quant_model);
            if (!quant_out.empty()) extra.emplace_back("out", quant_out);
            return snapuq::cmd_quantize(make_config(quant_o, extra));
        }
        if (app.got_subcommand(stream)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!stream_out.empty()) extra.emplace_back("out", stream_out);
            if (!stream_name.empty()) extra.emplace_back("name", stream_name);
            if (stream_paper) extra.emplace_back("paper_scale", "true");
            if (stream_seed_opt->count()) extra.emplace_back("stream_seed", std::to_string(stream_seed));
            return snapuq::cmd_stream(make_config(stream_o, extra));
        }
        if (app.got_subcommand(score)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!score_model.empty()) extra.emplace_back("model", score_model);
            if (!score_stream.empty()) extra.emplace_back("stream", score_stream);
            if (!score_out.empty()) extra.emplace_back("out", score_out);
            if (!score_engine.empty()) extra.emplace_back("engine", score_engine);
            if (!score_baseline.empty()) extra.emplace_back("baseline", score_baseline);
            if (score_tau_opt->count()) extra.emplace_back("tau", std::to_string(score_tau));
            return snapuq::cmd_score(make_config(score_o, extra));
        }
        if (app.got_subcommand(report)) {
            std::vector<std::pair<std::string, std::string>> extra;
            if (!rep_scores.empty()) extra.emplace_back("scores", rep_scores);
            if (!rep_stream.empty()) extra.emplace_back("stream", rep_stream);
            if (!rep_model.empty()) extra.emplace_back("model", rep_model);
            if (!rep_out.empty()) extra.emplace_back("out", rep_out);
            if (!rep_int8.empty()) extra.emplace_back("scores_int8", rep_int8);
            return snapuq::cmd_report(make_config(report_o, extra));
        }
        if (app.got_subcommand(selftest)) return snapuq::cmd_selftest();
        std::cerr << "error: no subcommand selected\n";
        return 2;
    } catch (const snapuq::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const snapuq::numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const snapuq::artifact_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
