#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mvreg/gradcheck.hpp"
#include "mvreg/syncnet.hpp"
#include "mvreg/synth.hpp"

using namespace mvreg;

namespace {

SyncScene scene_from_spec(const SceneSpec& spec) {
    const SyntheticScene s = gen_scene(spec);
    return make_sync_scene(s.graph, s.gt_poses);
}

SceneSpec small_spec(uint64_t seed, int n = 6, double rot_deg = 5.0, double tn = 0.1,
                     double p_out = 0.0) {
    SceneSpec spec;
    spec.n_frames_min = spec.n_frames_max = n;
    spec.rot_noise_deg = rot_deg;
    spec.trans_noise = tn;
    spec.outlier_fraction = p_out;
    spec.k = 4;
    spec.seed = seed;
    return spec;
}

Tensor permute_rows(const Tensor& t, const std::vector<int>& perm_rows) {
    Tensor out(t.rows, t.cols);
    for (int i = 0; i < t.rows; ++i)
        for (int j = 0; j < t.cols; ++j) out.at(i, j) = t.at(perm_rows[i], j);
    return out;
}

// Relabel node u -> perm[u], keeping the edge storage order so summation
// order (and therefore bit patterns) is preserved.
GraphInputs relabel(const GraphInputs& g, const std::vector<int>& perm) {
    GraphInputs out = g;
    out.root = perm[g.root];
    for (size_t i = 0; i < g.src.size(); ++i) {
        out.src[i] = perm[g.src[i]];
        out.dst[i] = perm[g.dst[i]];
    }
    std::vector<int> inv(perm.size());
    for (size_t u = 0; u < perm.size(); ++u) inv[perm[u]] = static_cast<int>(u);
    out.node_rot = permute_rows(g.node_rot, inv);
    out.node_t = permute_rows(g.node_t, inv);
    out.node_meta = permute_rows(g.node_meta, inv);
    return out;
}

double weighted_residual(const GraphInputs& g, const Tensor& rot, const Tensor& trans,
                         const Tensor& w) {
    double total = 0;
    for (int e = 0; e < g.n_edges(); ++e) {
        Mat3 ru, rv;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                ru(i, j) = rot.at(g.src[e], 3 * i + j);
                rv(i, j) = rot.at(g.dst[e], 3 * i + j);
            }
        Vec3 tu(trans.at(g.src[e], 0), trans.at(g.src[e], 1), trans.at(g.src[e], 2));
        Vec3 tv(trans.at(g.dst[e], 0), trans.at(g.dst[e], 1), trans.at(g.dst[e], 2));
        Vec3 tuv(g.edge_t.at(e, 0), g.edge_t.at(e, 1), g.edge_t.at(e, 2));
        total += w.at(e, 0) * (tu - ru * rv.transpose() * tv - tuv).squaredNorm();
    }
    return total;
}

}  // namespace

TEST_CASE("init_features produces d=64 features per node and edge") {
    SyncScene s = scene_from_spec(small_spec(1, 5));
    SyncNet net(0);
    Tape t;
    FeatureState f = net.init_features(t, s.inputs);
    CHECK(f.node_rot.rows == 5);
    CHECK(f.node_rot.cols == 64);
    CHECK(f.node_t.cols == 64);
    CHECK(f.node_conf.cols == 64);
    CHECK(f.edge_rot.rows == s.inputs.n_edges());
    CHECK(f.edge_rot.cols == 64);
    CHECK(f.edge_t.cols == 64);
    CHECK(f.edge_conf.cols == 64);
}

TEST_CASE("identical measurements produce identical edge features") {
    // Two edges with the same transform and confidences must map to the same
    // initial feature rows.
    SyncScene s = scene_from_spec(small_spec(2, 6));
    GraphInputs g = s.inputs;
    for (int j = 0; j < 9; ++j) g.edge_rot.at(1, j) = g.edge_rot.at(0, j);
    for (int j = 0; j < 3; ++j) {
        g.edge_t.at(1, j) = g.edge_t.at(0, j);
        g.edge_conf.at(1, j) = g.edge_conf.at(0, j);
    }
    SyncNet net(0);
    Tape t;
    FeatureState f = net.init_features(t, g);
    const Tensor& er = t.value(f.edge_rot);
    const Tensor& et = t.value(f.edge_t);
    const Tensor& ec = t.value(f.edge_conf);
    for (int j = 0; j < 64; ++j) {
        CHECK(er.at(0, j) == er.at(1, j));
        CHECK(et.at(0, j) == et.at(1, j));
        CHECK(ec.at(0, j) == ec.at(1, j));
    }
}

TEST_CASE("full network is permutation equivariant bit-exactly") {
    SyncScene s = scene_from_spec(small_spec(3, 7));
    const std::vector<int> perm = {3, 0, 6, 2, 5, 1, 4};
    GraphInputs relabeled = relabel(s.inputs, perm);
    SyncNet net(1);

    Tape t1, t2;
    auto o1 = net.run_network(t1, s.inputs, 2, false);
    auto o2 = net.run_network(t2, relabeled, 2, false);
    const Tensor& r1 = t1.value(o1.back().abs_rot);
    const Tensor& r2 = t2.value(o2.back().abs_rot);
    const Tensor& f1 = t1.value(o1.back().t_refined);
    const Tensor& f2 = t2.value(o2.back().t_refined);
    const Tensor& w1 = t1.value(o1.back().weight);
    const Tensor& w2 = t2.value(o2.back().weight);
    for (int u = 0; u < 7; ++u)
        for (int j = 0; j < 9; ++j) CHECK(r1.at(u, j) == r2.at(perm[u], j));
    for (int e = 0; e < s.inputs.n_edges(); ++e) CHECK(w1.at(e, 0) == w2.at(e, 0));
    // Translation refinement solves an anchored linear system whose
    // reduction order depends on the labeling; allow solver-level noise.
    for (int u = 0; u < 7; ++u)
        for (int j = 0; j < 3; ++j)
            CHECK(f1.at(u, j) == doctest::Approx(f2.at(perm[u], j)).epsilon(1e-9));
}

TEST_CASE("attention weights: single neighbor gets 1, duplicates split evenly") {
    Tape t;
    Tensor logits(3, 1);
    logits.at(0, 0) = 0.7;   // node 0's only edge
    logits.at(1, 0) = 1.3;   // node 1, two edges with equal logits
    logits.at(2, 0) = 1.3;
    Var alpha = t.segment_softmax(t.input(logits), {0, 1, 1}, 2);
    const Tensor& a = t.value(alpha);
    CHECK(a.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.at(1, 0) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(a.at(2, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("attention weights sum to 1 per node inside the network") {
    // Re-derive the rotation-stream attention from the same parameters and
    // inputs the network uses, and check normalization per segment.
    SyncScene s = scene_from_spec(small_spec(4, 6));
    SyncNet net(2);
    Tape t;
    FeatureState f = net.init_features(t, s.inputs);
    // Probe via segment_softmax directly on arbitrary logits over the real
    // edge structure: normalization is structural, not data-dependent.
    Rng rng(5);
    Tensor logits(s.inputs.n_edges(), 1);
    for (auto& v : logits.data) v = rng.normal(0, 3);
    Var alpha = t.segment_softmax(t.input(logits), s.inputs.src, s.inputs.n_nodes);
    std::vector<double> sums(s.inputs.n_nodes, 0.0);
    for (int e = 0; e < s.inputs.n_edges(); ++e) sums[s.inputs.src[e]] += t.value(alpha).at(e, 0);
    for (double v : sums) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    (void)f;
}

TEST_CASE("absolute_update rejects isolated nodes") {
    SyncScene s = scene_from_spec(small_spec(5, 5));
    GraphInputs g = s.inputs;
    g.n_nodes += 1;  // node with no edges
    Tensor grow(g.n_nodes, 9), gt(g.n_nodes, 3), gm(g.n_nodes, 2);
    g.node_rot = grow;
    g.node_t = gt;
    g.node_meta = gm;
    SyncNet net(3);
    Tape t;
    FeatureState f = net.init_features(t, g);
    CHECK_THROWS_AS(net.absolute_update(t, g, f, Stream::rotation), IsolatedNode);
}

TEST_CASE("run_network stays finite over 100 random graphs at T=4") {
    SyncNet net(4);
    for (uint64_t seed = 0; seed < 100; ++seed) {
        SyncScene s = scene_from_spec(small_spec(seed, 6, 10.0, 0.2, 0.3));
        Tape t;
        auto outs = net.run_network(t, s.inputs, 4, false);
        for (double v : t.value(outs.back().abs_rot).data) CHECK(std::isfinite(v));
        for (double v : t.value(outs.back().t_refined).data) CHECK(std::isfinite(v));
        for (double v : t.value(outs.back().weight).data) CHECK(std::isfinite(v));
    }
}

TEST_CASE("regress output shapes, positive weights, orthonormal rotations") {
    SyncScene s = scene_from_spec(small_spec(6, 8));
    SyncNet net(5);
    Tape t;
    auto outs = net.run_network(t, s.inputs, 1, true);
    REQUIRE(outs.size() == 1);
    const IterOutput& o = outs[0];
    CHECK(t.value(o.abs_rot).rows == 8);
    CHECK(t.value(o.rel_rot).rows == s.inputs.n_edges());
    CHECK(t.value(o.rel_t).rows == s.inputs.n_edges());
    for (double v : t.value(o.weight).data) CHECK(v > 0.0);
    const Tensor& rot = t.value(o.abs_rot);
    for (int u = 0; u < 8; ++u) {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = rot.at(u, 3 * i + j);
        CHECK((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6);
        CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("sixd_to_rot9 matches the scalar construction") {
    Rng rng(7);
    Tensor x(5, 6);
    for (auto& v : x.data) v = rng.normal(0, 1);
    Tape t;
    const Tensor& out = t.value(sixd_to_rot9(t, t.input(x)));
    for (int r = 0; r < 5; ++r) {
        Vec6 v;
        for (int j = 0; j < 6; ++j) v[j] = x.at(r, j);
        const Mat3 want = sixd_to_rotation(v);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                CHECK(out.at(r, 3 * i + j) == doctest::Approx(want(i, j)).epsilon(1e-12));
    }
}

TEST_CASE("refine_translations: noiseless measurements recover gt exactly") {
    SceneSpec spec = small_spec(8, 7, 0.0, 0.0, 0.0);
    const SyntheticScene s = gen_scene(spec);
    const SpanningInit init = spanning_init(s.graph);
    GraphInputs g = make_inputs(s.graph, init);

    // Exact rotations (the init chain is exact on noiseless graphs) with a
    // deliberately wrong coarse translation.
    Tape t;
    Var abs_rot = t.input(g.node_rot);
    Rng rng(9);
    Tensor coarse(g.n_nodes, 3);
    for (auto& v : coarse.data) v = rng.uniform(-2, 2);
    for (int j = 0; j < 3; ++j) coarse.at(g.root, j) = init.pose[g.root].t[j];
    Tensor w(g.n_edges(), 1);
    w.fill(1.0);
    Var refined = refine_translations(t, g, abs_rot, t.input(coarse), t.input(w));
    const Tensor& out = t.value(refined);
    // Gauge: root translation is anchored to the coarse root value.
    for (int u = 0; u < g.n_nodes; ++u)
        for (int j = 0; j < 3; ++j)
            CHECK(out.at(u, j) == doctest::Approx(init.pose[u].t[j]).epsilon(1e-9));

    // Coarse already exact -> delta 0.
    Var refined2 = refine_translations(t, g, abs_rot, t.input(g.node_t), t.input(w));
    const Tensor& out2 = t.value(refined2);
    for (int u = 0; u < g.n_nodes; ++u)
        for (int j = 0; j < 3; ++j)
            CHECK(out2.at(u, j) == doctest::Approx(g.node_t.at(u, j)).epsilon(1e-9));
}

TEST_CASE("refine_translations never increases the weighted residual and matches a dense oracle") {
    for (uint64_t seed : {11, 12, 13}) {
        SyncScene s = scene_from_spec(small_spec(seed, 6, 8.0, 0.15, 0.2));
        const GraphInputs& g = s.inputs;
        Tape t;
        Var abs_rot = t.input(g.node_rot);
        Rng rng(seed);
        Tensor coarse = g.node_t;
        for (auto& v : coarse.data) v += rng.normal(0, 0.3);
        Tensor w(g.n_edges(), 1);
        for (auto& v : w.data) v = rng.uniform(0.1, 2.0);
        Var refined = refine_translations(t, g, abs_rot, t.input(coarse), t.input(w));

        const double before = weighted_residual(g, g.node_rot, coarse, w);
        const double after = weighted_residual(g, g.node_rot, t.value(refined), w);
        CHECK(after <= before + 1e-12);

        // Dense pseudo-inverse oracle over the same anchored system.
        const int n = g.n_nodes;
        const int e = g.n_edges();
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(3 * e, 3 * n);
        Eigen::VectorXd l(3 * e);
        for (int k = 0; k < e; ++k) {
            Mat3 ru, rv;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    ru(i, j) = g.node_rot.at(g.src[k], 3 * i + j);
                    rv(i, j) = g.node_rot.at(g.dst[k], 3 * i + j);
                }
            const double sw = std::sqrt(w.at(k, 0));
            b.block<3, 3>(3 * k, 3 * g.src[k]) = sw * ru.transpose();
            b.block<3, 3>(3 * k, 3 * g.dst[k]) = -sw * rv.transpose();
            Vec3 tu(coarse.at(g.src[k], 0), coarse.at(g.src[k], 1), coarse.at(g.src[k], 2));
            Vec3 tv(coarse.at(g.dst[k], 0), coarse.at(g.dst[k], 1), coarse.at(g.dst[k], 2));
            Vec3 tuv(g.edge_t.at(k, 0), g.edge_t.at(k, 1), g.edge_t.at(k, 2));
            l.segment<3>(3 * k) = sw * (ru.transpose() * tuv - ru.transpose() * tu +
                                        rv.transpose() * tv);
        }
        Eigen::MatrixXd b_red(3 * e, 3 * (n - 1));
        int col = 0;
        for (int u = 0; u < n; ++u) {
            if (u == g.root) continue;
            b_red.middleCols(col, 3) = b.middleCols(3 * u, 3);
            col += 3;
        }
        Eigen::VectorXd delta = b_red.completeOrthogonalDecomposition().solve(l);
        const Tensor& out = t.value(refined);
        col = 0;
        for (int u = 0; u < n; ++u) {
            if (u == g.root) continue;
            for (int j = 0; j < 3; ++j)
                CHECK(out.at(u, j) - coarse.at(u, j) ==
                      doctest::Approx(delta[col * 3 + j]).epsilon(1e-8));
            ++col;
        }
    }
}

TEST_CASE("motion_loss: perfect predictions give zero, gauge leaves it bit-identical") {
    SceneSpec spec = small_spec(14, 5, 0.0, 0.0, 0.0);
    const SyntheticScene s = gen_scene(spec);
    SyncScene scene = make_sync_scene(s.graph, s.gt_poses);
    const GraphInputs& g = scene.inputs;

    Tape t;
    IterOutput o;
    o.abs_rot = t.input(g.node_rot);  // init == gt up to gauge on noiseless trees
    o.t_coarse = t.input(g.node_t);
    o.t_refined = t.input(g.node_t);
    o.rel_rot = t.input(g.edge_rot);
    o.rel_t = t.input(g.edge_t);
    Tensor w(g.n_edges(), 1);
    w.fill(1.0);
    o.weight = t.input(w);
    Var loss = motion_loss(t, {o, o}, scene.targets, LossConfig{});
    CHECK(t.value(loss).data[0] == doctest::Approx(0.0).epsilon(1e-10));

    // Gauging all gt absolutes leaves the relative targets mathematically
    // unchanged (to rounding), so the loss is gauge-blind.
    Rng rng(15);
    Vec3 axis(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1));
    RigidPose gauge{axis_angle_rotation(axis, 1.1), Vec3(3, -2, 1)};
    std::vector<RigidPose> gauged;
    for (const auto& p : s.gt_poses) gauged.push_back(compose(p, gauge));
    MotionTargets gt2 = make_targets(gauged, g);
    for (size_t i = 0; i < gt2.pair_rot.data.size(); ++i)
        CHECK(gt2.pair_rot.data[i] == doctest::Approx(scene.targets.pair_rot.data[i]).epsilon(1e-12));
    for (size_t i = 0; i < gt2.pair_t.data.size(); ++i)
        CHECK(gt2.pair_t.data[i] ==
              doctest::Approx(scene.targets.pair_t.data[i]).scale(10.0).epsilon(1e-12));

    Tape t3;
    IterOutput o3;
    Rng prng(16);
    Tensor rsix(g.n_nodes, 6), tc(g.n_nodes, 3), esix(g.n_edges(), 6), et(g.n_edges(), 3);
    for (auto& v : rsix.data) v = prng.normal(0, 1);
    for (auto& v : tc.data) v = prng.normal(0, 1);
    for (auto& v : esix.data) v = prng.normal(0, 1);
    for (auto& v : et.data) v = prng.normal(0, 1);
    o3.abs_rot = sixd_to_rot9(t3, t3.input(rsix));
    o3.t_coarse = t3.input(tc);
    o3.t_refined = t3.input(tc);
    o3.rel_rot = sixd_to_rot9(t3, t3.input(esix));
    o3.rel_t = t3.input(et);
    o3.weight = t3.input(w);
    const double l_plain =
        t3.value(motion_loss(t3, {o3}, scene.targets, LossConfig{})).data[0];
    const double l_gauged = t3.value(motion_loss(t3, {o3}, gt2, LossConfig{})).data[0];
    CHECK(l_gauged == doctest::Approx(l_plain).epsilon(1e-12));
}

TEST_CASE("motion_loss matches a hand-computed 2-node case") {
    // Two nodes, one undirected edge, gt = identity everywhere. Prediction:
    // node 1 rotated by exactly 90 degrees about z, translations zero.
    PoseGraph g;
    g.n_nodes = 2;
    RelMeasure m;
    m.transform = RigidPose::identity();
    m.overlap = m.icr = m.ipr = 0.5;
    g.add_undirected(0, 1, m);
    std::vector<RigidPose> gt(2, RigidPose::identity());
    SyncScene scene = make_sync_scene(g, gt);

    Tape t;
    Tensor rot(2, 9);
    rot.data = {1, 0, 0, 0, 1, 0, 0, 0, 1,   // node 0: I
                0, -1, 0, 1, 0, 0, 0, 0, 1}; // node 1: Rz(90)
    Tensor zero3(2, 3), ezero(2, 3), erot(2, 9);
    erot.data = {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1};
    Tensor w(2, 1);
    w.fill(1.0);
    IterOutput o;
    o.abs_rot = t.input(rot);
    o.t_coarse = t.input(zero3);
    o.t_refined = t.input(zero3);
    o.rel_rot = t.input(erot);
    o.rel_t = t.input(ezero);
    o.weight = t.input(w);
    Var loss = motion_loss(t, {o}, scene.targets, LossConfig{});

    // Pairs (0,1) and (1,0): R0 R1^T - I = Rz(-90) - I has absolute entry sum
    // 4 (two off-diagonal ones, two 1-cos(90) diagonals); same for R1 R0^T.
    // Mean over 4 ordered pairs x 9 entries = 8/36 = 2/9. The auxiliary
    // rotation term, all translations and all gt relatives are zero.
    CHECK(t.value(loss).data[0] == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("motion_loss gradients match finite differences on a 4-node graph") {
    SyncScene scene = scene_from_spec(small_spec(16, 4, 6.0, 0.1, 0.0));
    SyncNet net(6);
    // The root's node_t input row is exactly zero, which at freshly
    // initialized (zero) biases leaves ReLU units sitting on their kink and a
    // layernorm row with zero variance. Jitter the weights so the check runs
    // at a differentiable point.
    Rng jitter(99);
    for (Param* p : net.store.all())
        for (double& v : p->value.data) v += jitter.uniform(-0.02, 0.02);
    auto build = [&](Tape& t) {
        auto outs = net.run_network(t, scene.inputs, 2, true);
        return motion_loss(t, outs, scene.targets, LossConfig{});
    };
    GradCheckResult r = gradient_check(net.store, build, 1e-5, 2, 17);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_err < 1e-4);
    CHECK(r.checked > 100);
}

TEST_CASE("train_sync: same seed gives a bit-identical checkpoint") {
    std::vector<SyncScene> data;
    for (uint64_t i = 0; i < 3; ++i) data.push_back(scene_from_spec(small_spec(20 + i, 5)));
    auto run = [&](const std::string& path) {
        SyncNet net(7);
        SyncTrainConfig cfg;
        cfg.epochs = 2;
        cfg.iterations = 2;
        cfg.seed = 7;
        cfg.checkpoint = path;
        train_sync(net, data, cfg);
    };
    run("/tmp/mvreg_sync_a.mdgd");
    run("/tmp/mvreg_sync_b.mdgd");
    std::ifstream fa("/tmp/mvreg_sync_a.mdgd", std::ios::binary);
    std::ifstream fb("/tmp/mvreg_sync_b.mdgd", std::ios::binary);
    std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(a == b);
    CHECK(!a.empty());
    std::remove("/tmp/mvreg_sync_a.mdgd");
    std::remove("/tmp/mvreg_sync_b.mdgd");
}

TEST_CASE("train_sync rejects an empty dataset") {
    SyncNet net(8);
    CHECK_THROWS_AS(train_sync(net, {}, SyncTrainConfig{}), EmptyDataset);
}

TEST_CASE("training loss decreases over every 5-step window of the first 100 steps, 3 seeds") {
    for (uint64_t seed : {31, 32, 33}) {
        // A single fixed scene: every step optimizes the same loss surface.
        std::vector<SyncScene> data = {scene_from_spec(small_spec(seed * 100, 5))};
        SyncNet net(seed);
        SyncTrainConfig cfg;
        cfg.epochs = 100;
        cfg.iterations = 2;
        cfg.seed = seed;
        // Small rate, no decay: isolates pure descent on one loss surface.
        // AdamW's normalized steps still allow the odd sub-1% uptick, hence
        // the windowed check below instead of per-step monotonicity.
        cfg.lr = 1e-4;
        cfg.weight_decay = 0.0;
        cfg.loss_csv = "/tmp/mvreg_sync_loss.csv";
        train_sync(net, data, cfg);

        std::ifstream is(cfg.loss_csv);
        std::string line;
        std::getline(is, line);
        std::vector<double> losses;
        while (std::getline(is, line)) {
            const auto c1 = line.find(',');
            const auto c2 = line.find(',', c1 + 1);
            losses.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
        }
        REQUIRE(losses.size() == 100);
        for (size_t i = 5; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 5]);
        CHECK(losses.back() < 0.5 * losses.front());
        std::remove(cfg.loss_csv.c_str());
    }
}
