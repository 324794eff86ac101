#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "catch_amalgamated.hpp"
#include "snapuq/rng.hpp"
#include "snapuq/streamlab.hpp"

using namespace snapuq;

namespace {

double mean_of(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
}

double norm_of(const tensor_d& x) {
    double n = 0.0;
    for (double v : x.data) n += v * v;
    return std::sqrt(n);
}

}  // namespace

TEST_CASE("corruption operators") {
    SECTION("severity zero is a bitwise identity that consumes no randomness") {
        rng g(901);
        tensor_d x({7});
        for (auto& v : x.data) v = g.normal();
        for (corruption_kind k : {corruption_kind::noise, corruption_kind::blur, corruption_kind::contrast,
                                  corruption_kind::occlude}) {
            rng a(902), b(902);
            const tensor_d out = apply_corruption(x, k, 0, a);
            REQUIRE(out.data == x.data);
            REQUIRE(a.uniform01() == b.uniform01());
        }
    }
    SECTION("noise adds the tabled sigma times standard normals") {
        tensor_d zero({64});
        rng a(903), b(903);
        const tensor_d out = apply_corruption(zero, corruption_kind::noise, 1, a);
        for (double v : out.data) REQUIRE(v == 0.05 * b.normal());
    }
    SECTION("severity-five noise variance matches its table entry") {
        tensor_d zero({10000});
        rng g(904);
        const tensor_d out = apply_corruption(zero, corruption_kind::noise, 5, g);
        double var = 0.0;
        for (double v : out.data) var += v * v;
        var /= 10000.0;
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(0.25, 0.05 * 0.25));
        REQUIRE_THAT(mean_of(out.data), Catch::Matchers::WithinAbs(0.0, 0.02));
    }
    SECTION("severity-one blur has a unit kernel") {
        rng g(905);
        tensor_d img({1, 28, 28});
        for (auto& v : img.data) v = g.uniform01();
        const tensor_d out = apply_corruption(img, corruption_kind::blur, 1, g);
        REQUIRE(out.data == img.data);
    }
    SECTION("blur spreads an interior impulse into a uniform box") {
        tensor_d img({1, 28, 28});
        img.at3(0, 14, 14) = 1.0;
        rng g(906);
        const tensor_d out = apply_corruption(img, corruption_kind::blur, 2, g);
        double mass = 0.0;
        for (double v : out.data) mass += v;
        REQUIRE_THAT(mass, Catch::Matchers::WithinAbs(1.0, 1e-12));
        for (std::int64_t y = 13; y <= 15; ++y)
            for (std::int64_t x = 13; x <= 15; ++x)
                REQUIRE_THAT(out.at3(0, y, x), Catch::Matchers::WithinAbs(1.0 / 9.0, 1e-15));
        REQUIRE(out.at3(0, 10, 10) == 0.0);
    }
    SECTION("blur leaves a constant image unchanged") {
        tensor_d img({1, 8, 8});
        for (auto& v : img.data) v = 0.5;
        rng g(907);
        const tensor_d out = apply_corruption(img, corruption_kind::blur, 5, g);
        for (double v : out.data) REQUIRE(v == 0.5);
    }
    SECTION("contrast shrinks deviations about the preserved mean") {
        rng g(908);
        tensor_d x({50});
        for (auto& v : x.data) v = g.uniform01();
        const double mean = mean_of(x.data);
        const tensor_d out = apply_corruption(x, corruption_kind::contrast, 5, g);
        REQUIRE_THAT(mean_of(out.data), Catch::Matchers::WithinAbs(mean, 1e-12));
        for (std::size_t i = 0; i < x.data.size(); ++i)
            REQUIRE_THAT(out.data[i] - mean, Catch::Matchers::WithinAbs(0.3 * (x.data[i] - mean), 1e-12));
    }
    SECTION("occlusion zeroes one square of the tabled area") {
        tensor_d img({1, 28, 28});
        for (auto& v : img.data) v = 1.0;
        rng g(909);
        const tensor_d out = apply_corruption(img, corruption_kind::occlude, 3, g);
        std::int64_t zeros = 0;
        for (double v : out.data) zeros += v == 0.0;
        const std::int64_t side = std::lround(std::sqrt(0.2 * 784.0));
        REQUIRE(zeros == side * side);
    }
    SECTION("vector occlusion zeroes one contiguous run") {
        tensor_d v({100});
        for (auto& e : v.data) e = 1.0;
        rng g(910);
        const tensor_d out = apply_corruption(v, corruption_kind::occlude, 5, g);
        std::int64_t zeros = 0, first = -1, last = -1;
        for (std::int64_t i = 0; i < 100; ++i) {
            if (out.data[static_cast<std::size_t>(i)] == 0.0) {
                ++zeros;
                if (first < 0) first = i;
                last = i;
            }
        }
        REQUIRE(zeros == 40);
        REQUIRE(last - first + 1 == zeros);
    }
    SECTION("severity out of range is rejected") {
        tensor_d x({4});
        rng g(911);
        REQUIRE_THROWS_AS(apply_corruption(x, corruption_kind::noise, 6, g), std::invalid_argument);
        REQUIRE_THROWS_AS(apply_corruption(x, corruption_kind::noise, -1, g), std::invalid_argument);
    }
}

TEST_CASE("vector task") {
    const task_data td = make_vector_task(31);
    SECTION("split sizes, shapes, and label ranges") {
        REQUIRE(td.classes == 4);
        REQUIRE(td.train.xs.size() == 1200);
        REQUIRE(td.dev.xs.size() == 400);
        REQUIRE(td.id_pool.xs.size() == 1500);
        REQUIRE(td.ood_pool.xs.size() == 400);
        REQUIRE(td.train.xs.front().shape == std::vector<std::int64_t>{16});
        for (int y : td.train.ys) {
            REQUIRE(y >= 0);
            REQUIRE(y < 4);
        }
        for (int y : td.ood_pool.ys) REQUIRE(y == -1);
    }
    SECTION("out-of-distribution samples live farther from the origin") {
        double id_norm = 0.0, ood_norm = 0.0;
        for (const tensor_d& x : td.id_pool.xs) id_norm += norm_of(x);
        for (const tensor_d& x : td.ood_pool.xs) ood_norm += norm_of(x);
        id_norm /= static_cast<double>(td.id_pool.xs.size());
        ood_norm /= static_cast<double>(td.ood_pool.xs.size());
        REQUIRE(ood_norm > id_norm + 0.5);
    }
    SECTION("same seed reproduces the task bitwise") {
        const task_data again = make_vector_task(31);
        REQUIRE(again.train.xs.front().data == td.train.xs.front().data);
        REQUIRE(again.ood_pool.xs.back().data == td.ood_pool.xs.back().data);
        REQUIRE(again.train.ys == td.train.ys);
        const task_data other = make_vector_task(32);
        REQUIRE(other.train.xs.front().data != td.train.xs.front().data);
    }
}

TEST_CASE("glyph task") {
    const task_data td = make_glyph_task(37, 120, 40, 150, 60);
    SECTION("image shape and value range") {
        REQUIRE(td.train.xs.size() == 120);
        REQUIRE(td.ood_pool.xs.size() == 60);
        REQUIRE(td.train.xs.front().shape == std::vector<std::int64_t>{1, 28, 28});
        for (const tensor_d& x : td.train.xs)
            for (double v : x.data) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
    }
    SECTION("out-of-distribution frames are inverted and unlabeled") {
        for (int y : td.ood_pool.ys) REQUIRE(y == -1);
        double id_mean = 0.0, ood_mean = 0.0;
        for (const tensor_d& x : td.id_pool.xs) id_mean += mean_of(x.data);
        for (const tensor_d& x : td.ood_pool.xs) ood_mean += mean_of(x.data);
        id_mean /= static_cast<double>(td.id_pool.xs.size());
        ood_mean /= static_cast<double>(td.ood_pool.xs.size());
        REQUIRE(id_mean < 0.5);
        REQUIRE(ood_mean > 0.5);
    }
    SECTION("same seed reproduces the task bitwise") {
        const task_data again = make_glyph_task(37, 120, 40, 150, 60);
        REQUIRE(again.train.xs.front().data == td.train.xs.front().data);
        REQUIRE(again.dev.xs.back().data == td.dev.xs.back().data);
    }
}

TEST_CASE("stream construction") {
    const task_data td = make_vector_task(41);
    stream_spec spec;
    spec.seed = 43;

    SECTION("desk and paper scales hit their frame totals") {
        REQUIRE(spec.total_frames() == 780);
        stream_spec paper = spec;
        paper.set_paper_scale();
        REQUIRE(paper.total_frames() == 7400);
    }
    SECTION("segment order, severities, and corruption cycling") {
        const labeled_stream st = build_stream(spec, td.id_pool, td.ood_pool);
        REQUIRE(st.inputs.size() == 780);
        REQUIRE(st.truth.size() == 780);
        REQUIRE(st.truth[0].regime == regime_kind::id);
        REQUIRE(st.truth[199].regime == regime_kind::id);
        REQUIRE(st.truth[250].regime == regime_kind::cid);
        REQUIRE(st.truth[250].severity == 1);
        REQUIRE(st.truth[310].regime == regime_kind::ood);
        REQUIRE(st.truth[310].label == -1);
        REQUIRE(st.truth[350].severity == 2);
        REQUIRE(st.truth[700].regime == regime_kind::cid);
        REQUIRE(st.truth[700].severity == 5);
        REQUIRE(st.truth[779].severity == 5);
        REQUIRE(st.truth[200].corruption == corruption_kind::noise);
        REQUIRE(st.truth[226].corruption == corruption_kind::blur);
        REQUIRE(st.truth[251].corruption == corruption_kind::contrast);
        REQUIRE(st.truth[276].corruption == corruption_kind::occlude);
        std::int64_t n_id = 0, n_cid = 0, n_ood = 0;
        for (const frame_truth& t : st.truth) {
            n_id += t.regime == regime_kind::id;
            n_cid += t.regime == regime_kind::cid;
            n_ood += t.regime == regime_kind::ood;
        }
        REQUIRE(n_id == 200);
        REQUIRE(n_cid == 500);
        REQUIRE(n_ood == 80);
    }
    SECTION("same seed gives the same stream frame by frame") {
        const labeled_stream a = build_stream(spec, td.id_pool, td.ood_pool);
        const labeled_stream b = build_stream(spec, td.id_pool, td.ood_pool);
        REQUIRE(a.inputs.size() == b.inputs.size());
        for (std::size_t i = 0; i < a.inputs.size(); ++i) {
            REQUIRE(a.inputs[i].data == b.inputs[i].data);
            REQUIRE(a.truth[i].label == b.truth[i].label);
            REQUIRE(a.truth[i].severity == b.truth[i].severity);
        }
        stream_spec other = spec;
        other.seed = 44;
        const labeled_stream c = build_stream(other, td.id_pool, td.ood_pool);
        bool any_diff = false;
        for (std::size_t i = 0; i < 50 && !any_diff; ++i) any_diff = a.inputs[i].data != c.inputs[i].data;
        REQUIRE(any_diff);
    }
    SECTION("segments shorter than the window are rejected") {
        stream_spec bad = spec;
        bad.ood_len = 0;
        REQUIRE_THROWS_AS(build_stream(bad, td.id_pool, td.ood_pool), std::invalid_argument);
        bad = spec;
        bad.window = 1;
        REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
        REQUIRE_THROWS_AS(build_stream(spec, dataset{}, td.ood_pool), std::invalid_argument);
    }
}

TEST_CASE("stream serialization") {
    const task_data td = make_vector_task(47);
    stream_spec spec;
    spec.seed = 48;
    const labeled_stream st = build_stream(spec, td.id_pool, td.ood_pool);
    const std::string prefix = "/tmp/snapuq_test_stream";

    SECTION("round trip preserves frames to storage precision and truth exactly") {
        write_stream(prefix, st);
        const labeled_stream back = read_stream(prefix);
        REQUIRE(back.inputs.size() == st.inputs.size());
        REQUIRE(back.truth.size() == st.truth.size());
        for (std::size_t i = 0; i < st.inputs.size(); i += 37) {
            REQUIRE(back.inputs[i].shape == st.inputs[i].shape);
            for (std::size_t k = 0; k < st.inputs[i].data.size(); ++k)
                REQUIRE(back.inputs[i].data[k] == static_cast<double>(static_cast<float>(st.inputs[i].data[k])));
            REQUIRE(back.truth[i].label == st.truth[i].label);
            REQUIRE(back.truth[i].regime == st.truth[i].regime);
            REQUIRE(back.truth[i].severity == st.truth[i].severity);
            REQUIRE(back.truth[i].corruption == st.truth[i].corruption);
        }
    }
    SECTION("the unlabeled copy is the labeled copy minus truth") {
        write_stream(prefix, st);
        const labeled_stream labeled = read_stream(prefix, true);
        const labeled_stream blind = read_stream(prefix, false);
        REQUIRE(blind.truth.empty());
        REQUIRE(blind.inputs.size() == labeled.inputs.size());
        for (std::size_t i = 0; i < blind.inputs.size(); ++i)
            REQUIRE(blind.inputs[i].data == labeled.inputs[i].data);
    }
    SECTION("missing and malformed files are artifact errors") {
        REQUIRE_THROWS_AS(read_stream("/tmp/snapuq_no_such_stream"), artifact_error);
        std::ofstream bad("/tmp/snapuq_bad_stream.frames", std::ios::binary);
        bad << "not a stream at all";
        bad.close();
        REQUIRE_THROWS_AS(read_stream("/tmp/snapuq_bad_stream"), artifact_error);
        REQUIRE_THROWS_AS(write_stream(prefix, labeled_stream{}), std::invalid_argument);
    }
}

TEST_CASE("windowed accuracy band") {
    SECTION("a perfect run has unit mean and zero spread") {
        const id_band b = estimate_id_band(std::vector<int>(50, 1), 10);
        REQUIRE(b.mu == 1.0);
        REQUIRE(b.sigma == 0.0);
        REQUIRE(b.window == 10);
    }
    SECTION("alternating hits and misses pin every window at one half") {
        std::vector<int> c(40);
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = i % 2 == 0 ? 1 : 0;
        const id_band b = estimate_id_band(c, 2);
        REQUIRE(b.mu == 0.5);
        REQUIRE(b.sigma == 0.0);
    }
    SECTION("a short hand run matches the closed form") {
        const id_band b = estimate_id_band({1, 1, 0, 1}, 2);
        REQUIRE_THAT(b.mu, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
        REQUIRE_THAT(b.sigma, Catch::Matchers::WithinAbs(std::sqrt(1.0 / 18.0), 1e-12));
    }
    SECTION("a run shorter than the window is rejected") {
        REQUIRE_THROWS_AS(estimate_id_band({1, 0}, 5), std::invalid_argument);
    }
}

TEST_CASE("event labeling") {
    SECTION("accuracy at the band mean produces no events") {
        REQUIRE(label_events(std::vector<int>(200, 1), 20, 1.0, 0.0).empty());
    }
    SECTION("one sustained dip yields one event at the first crossing") {
        std::vector<int> c(400, 1);
        for (int t = 150; t < 300; ++t) c[static_cast<std::size_t>(t)] = 0;
        const std::vector<event_interval> ev = label_events(c, 20, 0.95, 0.01);
        REQUIRE(ev.size() == 1);
        REQUIRE(ev[0].onset == 151);
        REQUIRE(ev[0].offset == 317);
    }
    SECTION("dips separated by less than the window merge") {
        std::vector<int> c(300, 1);
        for (int t = 50; t < 60; ++t) c[static_cast<std::size_t>(t)] = 0;
        for (int t = 75; t < 85; ++t) c[static_cast<std::size_t>(t)] = 0;
        const std::vector<event_interval> ev = label_events(c, 10, 1.0, 0.02);
        REQUIRE(ev.size() == 1);
        REQUIRE(ev[0].onset == 50);
        REQUIRE(ev[0].offset == 93);
    }
    SECTION("dips separated by at least the window stay separate") {
        std::vector<int> c(300, 1);
        for (int t = 50; t < 60; ++t) c[static_cast<std::size_t>(t)] = 0;
        for (int t = 90; t < 100; ++t) c[static_cast<std::size_t>(t)] = 0;
        const std::vector<event_interval> ev = label_events(c, 10, 1.0, 0.02);
        REQUIRE(ev.size() == 2);
        REQUIRE(ev[0].onset == 50);
        REQUIRE(ev[1].onset == 90);
    }
    SECTION("flag runs shorter than the window are dropped") {
        std::vector<int> c(300, 1);
        c[295] = 0;  // the flag run truncates at the stream end
        REQUIRE(label_events(c, 10, 1.0, 0.02).empty());
    }
    SECTION("relabeling is idempotent") {
        rng g(912);
        std::vector<int> c(400);
        for (auto& v : c) v = g.uniform01() < 0.9 ? 1 : 0;
        for (int t = 200; t < 260; ++t) c[static_cast<std::size_t>(t)] = 0;
        const std::vector<event_interval> a = label_events(c, 20, 0.9, 0.03);
        const std::vector<event_interval> b = label_events(c, 20, 0.9, 0.03);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i].onset == b[i].onset);
            REQUIRE(a[i].offset == b[i].offset);
        }
    }
    SECTION("streams shorter than the window are rejected") {
        REQUIRE_THROWS_AS(label_events({1, 0, 1}, 5, 1.0, 0.0), std::invalid_argument);
    }
}

TEST_CASE("event frame mask") {
    const std::vector<int> mask = event_frame_mask(10, {{2, 4}, {8, 12}});
    REQUIRE(mask == std::vector<int>{0, 0, 1, 1, 1, 0, 0, 0, 1, 1});
}

TEST_CASE("per-severity detection series") {
    std::vector<frame_truth> truth;
    std::vector<double> scores;
    std::vector<int> mask;
    for (int i = 0; i < 20; ++i) {
        truth.push_back({0, regime_kind::id, 0, corruption_kind::none});
        scores.push_back(0.1);
        mask.push_back(0);
    }
    for (int s = 1; s <= 3; ++s)
        for (int i = 0; i < 10; ++i) {
            truth.push_back({0, regime_kind::cid, s, corruption_kind::noise});
            scores.push_back(s >= 2 ? 0.9 : 0.1);
            mask.push_back(s >= 2 ? 1 : 0);
        }
    for (int i = 0; i < 10; ++i) {
        truth.push_back({-1, regime_kind::ood, 0, corruption_kind::none});
        scores.push_back(100.0);  // must not leak into any severity subset
        mask.push_back(1);
    }

    const severity_series ser = severity_auprc_series(scores, truth, mask);
    REQUIRE(ser.degenerate_s0);
    REQUIRE(ser.auprc[0] == 0.0);
    REQUIRE(ser.auprc[1] == 0.0);  // no positives in the severity-1 subset
    REQUIRE_THAT(ser.auprc[2], Catch::Matchers::WithinAbs(1.0, 1e-9));
    REQUIRE_THAT(ser.auprc[3], Catch::Matchers::WithinAbs(1.0, 1e-9));
    REQUIRE(ser.auprc[4] == 0.0);
    REQUIRE(ser.auprc[5] == 0.0);

    SECTION("an imperfect ranking drops below one") {
        scores[0] = 0.95;  // one clean frame outranks the flagged ones
        const severity_series worse = severity_auprc_series(scores, truth, mask);
        REQUIRE(worse.auprc[2] < 1.0);
        REQUIRE(worse.auprc[2] > 0.5);
    }
    SECTION("size mismatches are rejected") {
        scores.pop_back();
        REQUIRE_THROWS_AS(severity_auprc_series(scores, truth, mask), std::invalid_argument);
    }
}
