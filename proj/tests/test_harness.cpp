#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mvreg/harness.hpp"

using namespace mvreg;

namespace {

constexpr double kPi = 3.14159265358979323846;

RigidPose random_pose(Rng& rng) {
    RigidPose p;
    p.R = axis_angle_rotation(
        Vec3(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1)).normalized(),
        rng.uniform(-kPi, kPi));
    p.t = Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    return p;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("config JSON round trip is byte-identical") {
    RunConfig cfg;
    cfg.profile = "outdoor";
    cfg.seed = 1234567890123ULL;
    cfg.tau = 0.07;
    cfg.sync_lr = 0.00123;
    cfg.overlap_checkpoint = "ckpt/overlap.mdgd";
    cfg.dump_intermediates = true;
    const std::string once = config_to_json(cfg);
    const std::string twice = config_to_json(config_from_json(once));
    CHECK(once == twice);

    save_config("/tmp/mvreg_cfg.json", cfg);
    CHECK(config_to_json(load_config("/tmp/mvreg_cfg.json")) == once);
    CHECK(read_file("/tmp/mvreg_cfg.json") == once);
    std::remove("/tmp/mvreg_cfg.json");
}

TEST_CASE("config invariants are enforced") {
    RunConfig cfg;
    CHECK_NOTHROW(validate(cfg));

    RunConfig bad = cfg;
    bad.gamma = 0.0;
    CHECK_THROWS_AS(validate(bad), InvalidConfig);
    bad = cfg;
    bad.gamma = 1.5;
    CHECK_THROWS_AS(validate(bad), InvalidConfig);
    bad = cfg;
    bad.iterations = 0;
    CHECK_THROWS_AS(validate(bad), InvalidConfig);
    bad = cfg;
    bad.tau = -1;
    CHECK_THROWS_AS(validate(bad), InvalidConfig);
    bad = cfg;
    bad.profile = "martian";
    CHECK_THROWS_AS(validate(bad), UnknownProfile);
    CHECK(profile_te_threshold("indoor") == 0.2);
    CHECK(profile_te_threshold("outdoor") == 0.5);
}

TEST_CASE("evaluate: perfect predictions give RR 1 and zero errors") {
    Rng rng(3);
    std::vector<RigidPose> gt;
    for (int i = 0; i < 6; ++i) gt.push_back(random_pose(rng));
    const EvalReport r = evaluate(gt, gt, 0.2);
    CHECK(r.rr == 1.0);
    CHECK(r.rr_translation_only == 1.0);
    CHECK(r.re_deg.size() == 30);  // 6*5 ordered pairs
    // acos bottoms out near sqrt(machine eps), ~1e-6 degrees.
    for (double e : r.re_deg) CHECK(e < 1e-5);
    for (double e : r.te) CHECK(e == 0.0);
    for (double b : r.re_ecdf) CHECK(b == 1.0);
    for (double b : r.te_ecdf) CHECK(b == 1.0);
    CHECK(r.mean_te == 0.0);
    CHECK(r.median_te == 0.0);
}

TEST_CASE("evaluate: a gauge-shifted prediction scores like the identity") {
    // Poses map world to frame coordinates, so a change of world frame acts
    // by right composition and leaves every relative pose untouched.
    Rng rng(4);
    std::vector<RigidPose> gt, pred;
    const RigidPose g = random_pose(rng);
    for (int i = 0; i < 5; ++i) {
        gt.push_back(random_pose(rng));
        pred.push_back(compose(gt.back(), g));
    }
    const EvalReport r = evaluate(pred, gt, 0.2);
    CHECK(r.rr == 1.0);
    CHECK(r.mean_re < 1e-5);
    CHECK(r.mean_te < 1e-9);
}

TEST_CASE("evaluate is invariant under a global pose applied to pred and gt jointly") {
    Rng rng(5);
    std::vector<RigidPose> gt, pred;
    for (int i = 0; i < 5; ++i) {
        gt.push_back(random_pose(rng));
        RigidPose noisy = gt.back();
        noisy.R = axis_angle_rotation(Vec3::UnitZ(), 0.02 * i) * noisy.R;
        noisy.t += Vec3(0.01 * i, 0, -0.02 * i);
        pred.push_back(noisy);
    }
    const EvalReport base = evaluate(pred, gt, 0.2);

    const RigidPose g = random_pose(rng);
    std::vector<RigidPose> gt2, pred2;
    for (size_t i = 0; i < gt.size(); ++i) {
        gt2.push_back(compose(gt[i], g));
        pred2.push_back(compose(pred[i], g));
    }
    const EvalReport moved = evaluate(pred2, gt2, 0.2);
    CHECK(moved.rr == base.rr);
    for (size_t i = 0; i < base.re_deg.size(); ++i) {
        CHECK(std::abs(moved.re_deg[i] - base.re_deg[i]) < 1e-9);
        CHECK(std::abs(moved.te[i] - base.te[i]) < 1e-9);
    }
    CHECK(std::abs(moved.mean_re - base.mean_re) < 1e-9);
    CHECK(std::abs(moved.mean_te - base.mean_te) < 1e-9);
}

TEST_CASE("evaluate: one bad pose out of three fails exactly its four ordered pairs") {
    Rng rng(6);
    std::vector<RigidPose> gt, pred;
    for (int i = 0; i < 3; ++i) gt.push_back(random_pose(rng));
    pred = gt;
    pred[2].R = axis_angle_rotation(Vec3::UnitX(), 1.0) * pred[2].R;  // ~57 degrees off
    pred[2].t += Vec3(1, 1, 1);

    const EvalReport r = evaluate(pred, gt, 0.2);
    // Ordered pairs: (0,1),(0,2),(1,0),(1,2),(2,0),(2,1); the four touching
    // pose 2 fail both gates, the remaining two are exact.
    CHECK(r.rr == doctest::Approx(2.0 / 6.0));
    CHECK(r.rr_translation_only == doctest::Approx(2.0 / 6.0));
    int bad = 0;
    for (double e : r.te)
        if (e > 0.2) ++bad;
    CHECK(bad == 4);
}

TEST_CASE("evaluate rejects mismatched or tiny inputs") {
    Rng rng(7);
    std::vector<RigidPose> a = {random_pose(rng), random_pose(rng)};
    std::vector<RigidPose> b = {random_pose(rng)};
    CHECK_THROWS_AS(evaluate(a, b, 0.2), CountMismatch);
    CHECK_THROWS_AS(evaluate(b, b, 0.2), EmptyInput);
}

TEST_CASE("eCDF buckets are nondecreasing and report round trips through JSON") {
    Rng rng(8);
    std::vector<RigidPose> gt, pred;
    for (int i = 0; i < 8; ++i) {
        gt.push_back(random_pose(rng));
        RigidPose noisy = gt.back();
        noisy.R = axis_angle_rotation(Vec3::UnitY(), rng.uniform(0, 0.6)) * noisy.R;
        noisy.t += Vec3(rng.uniform(-0.5, 0.5), 0, 0);
        pred.push_back(noisy);
    }
    const EvalReport r = evaluate(pred, gt, 0.2);
    for (size_t i = 1; i < r.re_ecdf.size(); ++i) CHECK(r.re_ecdf[i] >= r.re_ecdf[i - 1]);
    for (size_t i = 1; i < r.te_ecdf.size(); ++i) CHECK(r.te_ecdf[i] >= r.te_ecdf[i - 1]);
    CHECK(r.rr >= 0.0);
    CHECK(r.rr <= 1.0);

    save_report("/tmp/mvreg_report.json", r);
    const EvalReport back = load_report("/tmp/mvreg_report.json");
    CHECK(back.rr == r.rr);
    CHECK(back.mean_re == r.mean_re);
    CHECK(back.re_deg == r.re_deg);
    CHECK(back.te == r.te);
    CHECK(back.te_ecdf == r.te_ecdf);
    std::remove("/tmp/mvreg_report.json");
}

TEST_CASE("report aggregation: single report, duplicates, and spreadsheet means") {
    Rng rng(9);
    auto make_report = [&](double rot_noise) {
        std::vector<RigidPose> gt, pred;
        for (int i = 0; i < 5; ++i) {
            gt.push_back(random_pose(rng));
            RigidPose noisy = gt.back();
            noisy.R = axis_angle_rotation(Vec3::UnitZ(), rng.uniform(0, rot_noise)) * noisy.R;
            noisy.t += Vec3(0, rng.uniform(-0.2, 0.2), 0);
            pred.push_back(noisy);
        }
        return evaluate(pred, gt, 0.2);
    };
    const EvalReport r1 = make_report(0.1);
    const EvalReport r2 = make_report(0.5);

    CHECK_THROWS_AS(report_table({}), EmptyInput);

    // A single report's mean row repeats its own values.
    const std::string single = report_csv({{"a", r1}});
    std::istringstream is(single);
    std::string header, row, mean_row;
    std::getline(is, header);
    std::getline(is, row);
    std::getline(is, mean_row);
    CHECK(row.substr(row.find(',')) == mean_row.substr(mean_row.find(',')));

    // Two identical reports aggregate to the same values.
    const std::string twice = report_csv({{"a", r1}, {"a", r1}});
    std::istringstream is2(twice);
    std::getline(is2, header);
    std::getline(is2, row);
    std::getline(is2, row);
    std::getline(is2, mean_row);
    CHECK(row.substr(row.find(',')) == mean_row.substr(mean_row.find(',')));

    // Mixed reports: the mean column matches a direct recomputation.
    const std::string mixed = report_csv({{"a", r1}, {"b", r2}});
    std::istringstream is3(mixed);
    std::getline(is3, header);
    std::getline(is3, row);
    std::getline(is3, row);
    std::getline(is3, mean_row);
    std::vector<double> cols;
    std::stringstream ms(mean_row.substr(mean_row.find(',') + 1));
    for (std::string cell; std::getline(ms, cell, ',');) cols.push_back(std::stod(cell));
    CHECK(cols[0] == doctest::Approx((r1.rr + r2.rr) / 2).epsilon(1e-12));
    CHECK(cols[2] == doctest::Approx((r1.mean_re + r2.mean_re) / 2).epsilon(1e-12));
    CHECK(cols[4] == doctest::Approx((r1.mean_te + r2.mean_te) / 2).epsilon(1e-12));

    const std::string table = report_table({{"a", r1}, {"b", r2}});
    CHECK(table.find("mean") != std::string::npos);
    CHECK(table.find("rr") != std::string::npos);
}

TEST_CASE("pipeline is deterministic: same graph and seeds give byte-identical artifacts") {
    SceneSpec spec;
    spec.n_frames_min = spec.n_frames_max = 6;
    spec.k = 5;
    spec.seed = 11;
    const SyntheticScene scene = gen_scene(spec);

    RunConfig cfg;
    cfg.iterations = 2;
    auto run_once = [&](const std::string& dir) {
        SyncNet net(21);
        RunConfig c = cfg;
        c.out_dir = dir;
        c.dump_intermediates = true;
        run_pipeline(scene.graph, net, c, &scene.gt_poses);
    };
    run_once("/tmp/mvreg_pipe_a");
    run_once("/tmp/mvreg_pipe_b");
    for (const char* f : {"graph.json", "init_poses.json", "coarse_poses.json", "poses.json",
                          "report.json"}) {
        CAPTURE(f);
        CHECK(read_file(std::string("/tmp/mvreg_pipe_a/") + f) ==
              read_file(std::string("/tmp/mvreg_pipe_b/") + f));
    }
}

TEST_CASE("pipeline surfaces stage-tagged errors") {
    PoseGraph g;  // two disconnected components
    g.n_nodes = 4;
    RelMeasure m;
    g.add_undirected(0, 1, m);
    g.add_undirected(2, 3, m);
    SyncNet net(1);
    RunConfig cfg;
    try {
        run_pipeline(g, net, cfg);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.stage == "spanning-init");
        CHECK(std::string(e.what()).find("[spanning-init]") != std::string::npos);
    }
}

TEST_CASE("descriptor front half builds a registrable graph on planted frames") {
    // Shared world points observed by 4 overlapping frames; descriptors are
    // identical for the same world point, so mutual matching is exact.
    Rng rng(31);
    const int n_points = 160, dim = 16, n_frames = 4;
    Eigen::MatrixXd world(n_points, 3), desc(n_points, dim);
    for (int i = 0; i < n_points; ++i) {
        for (int j = 0; j < 3; ++j) world(i, j) = rng.uniform(-2, 2);
        for (int j = 0; j < dim; ++j) desc(i, j) = rng.normal(0, 1);
    }

    std::vector<RigidPose> gt;
    std::vector<DescriptorSet> frames;
    for (int f = 0; f < n_frames; ++f) {
        gt.push_back(random_pose(rng));
        // Frame f sees a contiguous window of world points (partial overlap).
        const int lo = f * 30, hi = lo + 70;
        DescriptorSet s;
        s.keypoints.resize(hi - lo, 3);
        s.descriptors.resize(hi - lo, dim);
        for (int i = lo; i < hi; ++i) {
            // Keypoints live in the frame's own coordinates: p_f = T_f(p_world).
            const Vec3 p = gt[f].R * Vec3(world.row(i).transpose()) + gt[f].t;
            s.keypoints.row(i - lo) = p.transpose();
            s.descriptors.row(i - lo) = desc.row(i);
        }
        s.normalize_descriptors();
        frames.push_back(s);
    }

    // A briefly trained overlap net ranks truly overlapping pairs above
    // spurious ones (true matches have zero descriptor distance).
    OverlapNet onet(5);
    OverlapTrainConfig otc;
    otc.epochs = 2;
    train_overlap(onet, gen_stats_dataset(2000, 12), otc);

    RunConfig cfg;
    cfg.k = 2;
    const PoseGraph g = graph_from_descriptors(frames, onet, cfg);
    CHECK(g.n_nodes == n_frames);
    CHECK(g.connected());
    // Every measured edge should match the ground-truth relative: the
    // correspondences are exact, so RANSAC recovers T_u ∘ T_v⁻¹.
    for (const PoseGraph::Edge& e : g.edges) {
        const RigidPose rel = relative_pose(gt[e.u], gt[e.v]);
        CHECK(rotation_error(e.m.transform.R, rel.R) < 1e-6);
        CHECK(translation_error(e.m.transform.t, rel.t) < 1e-6);
        CHECK(e.m.icr > 0.0);
        CHECK(e.m.ipr >= 0.0);
        CHECK(e.m.ipr <= 1.0);
    }
    CHECK_THROWS_AS(graph_from_descriptors({frames[0]}, onet, cfg), EmptyInput);
}

TEST_CASE("train_sync resume: split run reproduces the single run bit for bit") {
    std::vector<SyncScene> data;
    for (uint64_t i = 0; i < 3; ++i) {
        SceneSpec spec;
        spec.n_frames_min = spec.n_frames_max = 5;
        spec.k = 4;
        spec.seed = 40 + i;
        const SyntheticScene sc = gen_scene(spec);
        data.push_back(make_sync_scene(sc.graph, sc.gt_poses));
    }

    auto train = [&](SyncNet& net, int stop_after, const std::string& ckpt,
                     const std::string& state) {
        SyncTrainConfig cfg;
        cfg.epochs = 4;
        cfg.stop_after_epochs = stop_after;
        cfg.iterations = 2;
        cfg.seed = 17;
        cfg.checkpoint = ckpt;
        cfg.resume_state = state;
        train_sync(net, data, cfg);
    };

    // One uninterrupted 4-epoch run.
    {
        SyncNet net(9);
        train(net, 0, "/tmp/mvreg_res_full.mdgd", "/tmp/mvreg_res_full.state");
    }
    // The same 4-epoch schedule interrupted after 2 epochs and resumed from
    // the saved checkpoint plus optimizer state.
    {
        std::remove("/tmp/mvreg_res_split.state");
        SyncNet net(9);
        train(net, 2, "/tmp/mvreg_res_split.mdgd", "/tmp/mvreg_res_split.state");
        SyncNet net2(9);
        net2.load("/tmp/mvreg_res_split.mdgd");
        train(net2, 0, "/tmp/mvreg_res_split.mdgd", "/tmp/mvreg_res_split.state");
    }
    const std::string full = read_file("/tmp/mvreg_res_full.mdgd");
    const std::string split = read_file("/tmp/mvreg_res_split.mdgd");
    CHECK(full.size() > 0);
    CHECK(full == split);
    for (const char* f : {"/tmp/mvreg_res_full.mdgd", "/tmp/mvreg_res_full.state",
                          "/tmp/mvreg_res_split.mdgd", "/tmp/mvreg_res_split.state"})
        std::remove(f);
}
