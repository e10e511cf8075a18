#include "mvreg/syncnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mvreg {

namespace {

void flatten_rotation(const Mat3& r, Tensor& out, int row) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out.at(row, 3 * i + j) = r(i, j);
}

Mat3 unflatten_rotation(const Tensor& t, int row) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r(i, j) = t.at(row, 3 * i + j);
    return r;
}

Var constant(Tape& t, int rows, int cols, double v) {
    Tensor c(rows, cols);
    c.fill(v);
    return t.input(std::move(c));
}

}  // namespace

GraphInputs make_inputs(const PoseGraph& g, const SpanningInit& init) {
    GraphInputs in;
    in.n_nodes = g.n_nodes;
    in.root = init.root;
    const int e = static_cast<int>(g.edges.size());
    in.edge_rot = Tensor(e, 9);
    in.edge_t = Tensor(e, 3);
    in.edge_conf = Tensor(e, 3);
    for (int i = 0; i < e; ++i) {
        const auto& edge = g.edges[i];
        in.src.push_back(edge.u);
        in.dst.push_back(edge.v);
        flatten_rotation(edge.m.transform.R, in.edge_rot, i);
        for (int j = 0; j < 3; ++j) in.edge_t.at(i, j) = edge.m.transform.t[j];
        in.edge_conf.at(i, 0) = edge.m.overlap;
        in.edge_conf.at(i, 1) = edge.m.icr;
        in.edge_conf.at(i, 2) = edge.m.ipr;
    }
    in.node_rot = Tensor(g.n_nodes, 9);
    in.node_t = Tensor(g.n_nodes, 3);
    in.node_meta = Tensor(g.n_nodes, 2);
    const int max_hop = *std::max_element(init.hop.begin(), init.hop.end());
    for (int u = 0; u < g.n_nodes; ++u) {
        flatten_rotation(init.pose[u].R, in.node_rot, u);
        for (int j = 0; j < 3; ++j) in.node_t.at(u, j) = init.pose[u].t[j];
        in.node_meta.at(u, 0) = max_hop > 0 ? static_cast<double>(init.hop[u]) / max_hop : 0.0;
        in.node_meta.at(u, 1) = init.priority[u];
    }
    return in;
}

Var sixd_to_rot9(Tape& t, Var x) {
    Var a = t.slice_cols(x, 0, 3);
    Var b = t.slice_cols(x, 3, 6);
    Var n1 = t.sqrt_(t.row_dot(a, a));
    for (double v : t.value(n1).data)
        if (v < 1e-8) throw DegenerateSixd("sixd_to_rot9: first vector too small");
    Var b1 = t.div_col(a, n1);
    Var u2 = t.sub(b, t.mul_col(b1, t.row_dot(b1, b)));
    Var n2 = t.sqrt_(t.row_dot(u2, u2));
    for (double v : t.value(n2).data)
        if (v < 1e-8) throw DegenerateSixd("sixd_to_rot9: vectors nearly parallel");
    Var b2 = t.div_col(u2, n2);
    Var b3 = t.cross3(b1, b2);
    // b1,b2,b3 are the rotation's columns; reorder the concatenation into
    // row-major 9-vectors.
    return t.select_cols(t.concat_cols({b1, b2, b3}), {0, 3, 6, 1, 4, 7, 2, 5, 8});
}

StreamParams::StreamParams(ParamStore& s, const std::string& prefix, int mix_in, Rng& rng)
    : mix(s, prefix + ".mix", mix_in, SyncNet::kDim, SyncNet::kDim, rng),
      wq(s, prefix + ".wq", 2 * SyncNet::kDim, SyncNet::kDim, rng),
      wk(s, prefix + ".wk", 2 * SyncNet::kDim, SyncNet::kDim, rng),
      wf(s, prefix + ".wf", SyncNet::kDim, SyncNet::kDim, rng),
      wc(s, prefix + ".wc", SyncNet::kDim, SyncNet::kDim, rng),
      abs_gru(s, prefix + ".abs_gru", 2 * SyncNet::kDim, 2 * SyncNet::kDim, rng),
      ln_node_h(s, prefix + ".ln_node_h", SyncNet::kDim),
      ln_node_c(s, prefix + ".ln_node_c", SyncNet::kDim),
      rel_f(s, prefix + ".rel_f", 2 * SyncNet::kDim, SyncNet::kDim, SyncNet::kDim, rng),
      rel_c(s, prefix + ".rel_c", 2 * SyncNet::kDim, SyncNet::kDim, SyncNet::kDim, rng),
      rel_gru(s, prefix + ".rel_gru", 2 * SyncNet::kDim, 2 * SyncNet::kDim, rng),
      ln_edge_h(s, prefix + ".ln_edge_h", SyncNet::kDim),
      ln_edge_c(s, prefix + ".ln_edge_c", SyncNet::kDim) {}

SyncNet::SyncNet(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x5f));
    in_edge_rot_ = Mlp(store, "in.edge_rot", 9, kDim, kDim, rng);
    in_edge_t_ = Mlp(store, "in.edge_t", 3, kDim, kDim, rng);
    in_edge_conf_ = Mlp(store, "in.edge_conf", 3, kDim, kDim, rng);
    in_node_rot_ = Mlp(store, "in.node_rot", 9, kDim, kDim, rng);
    in_node_t_ = Mlp(store, "in.node_t", 3, kDim, kDim, rng);
    in_node_conf_ = Mlp(store, "in.node_conf", 2, kDim, kDim, rng);
    rot_ = StreamParams(store, "rot", 2 * kDim, rng);
    trans_ = StreamParams(store, "trans", 3 * kDim, rng);
    head_abs_rot_ = Mlp(store, "head.abs_rot", kDim, kDim, 6, rng);
    head_abs_t_ = Mlp(store, "head.abs_t", kDim, kDim, 3, rng);
    head_rel_rot_ = Mlp(store, "head.rel_rot", kDim, kDim, 6, rng);
    head_rel_t_ = Mlp(store, "head.rel_t", kDim, kDim, 3, rng);
    head_weight_ = Mlp(store, "head.weight", kDim, kDim, 1, rng);
}

FeatureState SyncNet::init_features(Tape& t, const GraphInputs& g) const {
    FeatureState s;
    s.edge_rot = in_edge_rot_(t, t.input(g.edge_rot));
    s.edge_t = in_edge_t_(t, t.input(g.edge_t));
    s.edge_conf = in_edge_conf_(t, t.input(g.edge_conf));
    s.node_rot = in_node_rot_(t, t.input(g.node_rot));
    s.node_t = in_node_t_(t, t.input(g.node_t));
    s.node_conf = in_node_conf_(t, t.input(g.node_meta));
    return s;
}

void SyncNet::absolute_update(Tape& t, const GraphInputs& g, FeatureState& s,
                              Stream stream) const {
    std::vector<int> out_degree(g.n_nodes, 0);
    for (int u : g.src) ++out_degree[u];
    for (int u = 0; u < g.n_nodes; ++u)
        if (out_degree[u] == 0) throw IsolatedNode("absolute_update: isolated node");

    const StreamParams& p = stream == Stream::rotation ? rot_ : trans_;
    Var h_node = stream == Stream::rotation ? s.node_rot : s.node_t;
    Var h_edge = stream == Stream::rotation ? s.edge_rot : s.edge_t;

    // Neighbor mix z_v; the translation stream also sees the rotation edge
    // feature updated earlier this iteration.
    std::vector<Var> mix_in = {t.gather_rows(h_node, g.dst), h_edge};
    if (stream == Stream::translation) mix_in.push_back(s.edge_rot);
    Var z = p.mix(t, t.concat_cols(mix_in));

    // Confidence attention over each node's outgoing edges.
    Var q = p.wq(t, t.concat_cols({h_node, s.node_conf}));
    Var k = p.wk(t, t.concat_cols({z, s.edge_conf}));
    Var logits = t.scale(t.row_dot(t.gather_rows(q, g.src), k), 1.0 / std::sqrt(kDim));
    Var alpha = t.segment_softmax(logits, g.src, g.n_nodes);
    Var msg = t.segment_sum(t.mul_col(p.wf(t, z), alpha), g.src, g.n_nodes);
    Var conf_msg = t.segment_sum(t.mul_col(p.wc(t, s.edge_conf), alpha), g.src, g.n_nodes);

    Var hidden = t.concat_cols({p.ln_node_h(t, h_node), p.ln_node_c(t, s.node_conf)});
    Var updated = p.abs_gru(t, hidden, t.concat_cols({msg, conf_msg}));
    Var h_new = t.slice_cols(updated, 0, kDim);
    (stream == Stream::rotation ? s.node_rot : s.node_t) = h_new;
    s.node_conf = t.slice_cols(updated, kDim, 2 * kDim);
}

void SyncNet::relative_update(Tape& t, const GraphInputs& g, FeatureState& s,
                              Stream stream) const {
    const StreamParams& p = stream == Stream::rotation ? rot_ : trans_;
    Var h_node = stream == Stream::rotation ? s.node_rot : s.node_t;
    Var h_edge = stream == Stream::rotation ? s.edge_rot : s.edge_t;

    Var fu = t.gather_rows(h_node, g.src);
    Var fv = t.gather_rows(h_node, g.dst);
    Var cu = t.gather_rows(s.node_conf, g.src);
    Var cv = t.gather_rows(s.node_conf, g.dst);
    Var in_f = p.rel_f(t, t.concat_cols({fu, fv}));
    Var in_c = p.rel_c(t, t.concat_cols({cu, cv}));

    Var hidden = t.concat_cols({p.ln_edge_h(t, h_edge), p.ln_edge_c(t, s.edge_conf)});
    Var updated = p.rel_gru(t, hidden, t.concat_cols({in_f, in_c}));
    Var h_new = t.slice_cols(updated, 0, kDim);
    (stream == Stream::rotation ? s.edge_rot : s.edge_t) = h_new;
    s.edge_conf = t.slice_cols(updated, kDim, 2 * kDim);
}

Var refine_translations(Tape& t, const GraphInputs& g, Var abs_rot, Var t_coarse, Var weight) {
    const int n = g.n_nodes;
    const int e = g.n_edges();
    Var ru = t.gather_rows(abs_rot, g.src);
    Var rv = t.gather_rows(abs_rot, g.dst);
    Var t_uv = t.input(g.edge_t);

    // L_e = R_u^T t_uv - R_u^T t_u^coarse + R_v^T t_v^coarse
    Var l = t.add(t.sub(t.rot9_applyT(ru, t_uv),
                        t.rot9_applyT(ru, t.gather_rows(t_coarse, g.src))),
                  t.rot9_applyT(rv, t.gather_rows(t_coarse, g.dst)));

    // Normal equations B^T P B delta = B^T P L, assembled blockwise: B holds
    // R_u^T at (e,u) and -R_v^T at (e,v), P = diag(w_uv I_3).
    Var rhs_nodes = t.sub(
        t.segment_sum(t.mul_col(t.rot9_apply(ru, l), weight), g.src, n),
        t.segment_sum(t.mul_col(t.rot9_apply(rv, l), weight), g.dst, n));

    Var a_full = t.add(
        t.add(t.block_assemble(t.mul_col(t.rot9_mul_nt(ru, ru), weight), g.src, g.src, n, n),
              t.block_assemble(t.mul_col(t.rot9_mul_nt(rv, rv), weight), g.dst, g.dst, n, n)),
        t.add(t.block_assemble(t.scale(t.mul_col(t.rot9_mul_nt(ru, rv), weight), -1.0),
                               g.src, g.dst, n, n),
              t.block_assemble(t.scale(t.mul_col(t.rot9_mul_nt(rv, ru), weight), -1.0),
                               g.dst, g.src, n, n)));
    (void)e;

    // Anchor the root's correction at zero: drop its rows and columns.
    std::vector<int> keep_nodes, keep_coords;
    for (int u = 0; u < n; ++u) {
        if (u == g.root) continue;
        keep_nodes.push_back(u);
        for (int j = 0; j < 3; ++j) keep_coords.push_back(3 * u + j);
    }
    Var a_red = t.select_cols(t.gather_rows(a_full, keep_coords), keep_coords);
    Var rhs = t.reshape(t.gather_rows(rhs_nodes, keep_nodes), 3 * (n - 1), 1);
    Var delta_red = t.solve(a_red, rhs);
    for (double v : t.value(delta_red).data)
        if (!std::isfinite(v)) throw SingularSystem("refine_translations: singular system");
    Var delta = t.scatter_rows(t.reshape(delta_red, n - 1, 3), keep_nodes, n);
    return t.add(t_coarse, delta);
}

IterOutput SyncNet::regress(Tape& t, const GraphInputs& g, const FeatureState& s) const {
    IterOutput out;
    out.abs_rot = sixd_to_rot9(t, head_abs_rot_(t, s.node_rot));
    out.t_coarse = head_abs_t_(t, s.node_t);
    out.rel_rot = sixd_to_rot9(t, head_rel_rot_(t, s.edge_rot));
    out.rel_t = head_rel_t_(t, s.edge_t);
    out.weight = t.add(t.softplus(head_weight_(t, s.edge_conf)),
                       constant(t, g.n_edges(), 1, 1e-4));
    out.t_refined = refine_translations(t, g, out.abs_rot, out.t_coarse, out.weight);
    return out;
}

std::vector<IterOutput> SyncNet::run_network(Tape& t, const GraphInputs& g, int iterations,
                                             bool regress_each) const {
    FeatureState s = init_features(t, g);
    std::vector<IterOutput> outs;
    for (int it = 0; it < iterations; ++it) {
        absolute_update(t, g, s, Stream::rotation);
        absolute_update(t, g, s, Stream::rotation);
        relative_update(t, g, s, Stream::rotation);
        absolute_update(t, g, s, Stream::translation);
        absolute_update(t, g, s, Stream::translation);
        relative_update(t, g, s, Stream::translation);
        if (regress_each || it == iterations - 1) outs.push_back(regress(t, g, s));
    }
    return outs;
}

MotionTargets make_targets(const std::vector<RigidPose>& gt_poses, const GraphInputs& g) {
    MotionTargets m;
    const int n = static_cast<int>(gt_poses.size());
    m.pair_rot = Tensor(n * n, 9);
    m.pair_t = Tensor(n * n, 3);
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
            const int row = u * n + v;
            m.pair_u.push_back(u);
            m.pair_v.push_back(v);
            const RigidPose rel = relative_pose(gt_poses[u], gt_poses[v]);
            flatten_rotation(rel.R, m.pair_rot, row);
            for (int j = 0; j < 3; ++j) m.pair_t.at(row, j) = rel.t[j];
        }
    const int e = g.n_edges();
    m.edge_rot = Tensor(e, 9);
    m.edge_t = Tensor(e, 3);
    for (int i = 0; i < e; ++i) {
        const RigidPose rel = relative_pose(gt_poses[g.src[i]], gt_poses[g.dst[i]]);
        flatten_rotation(rel.R, m.edge_rot, i);
        for (int j = 0; j < 3; ++j) m.edge_t.at(i, j) = rel.t[j];
    }
    return m;
}

Var motion_loss(Tape& t, const std::vector<IterOutput>& iters, const MotionTargets& targets,
                const LossConfig& cfg) {
    Var gt_pair_rot = t.input(targets.pair_rot);
    Var gt_pair_t = t.input(targets.pair_t);
    Var gt_edge_rot = t.input(targets.edge_rot);
    Var gt_edge_t = t.input(targets.edge_t);

    const int rounds = static_cast<int>(iters.size());
    Var total;
    for (int i = 0; i < rounds; ++i) {
        const IterOutput& o = iters[i];
        Var pred_rel = t.rot9_mul_nt(t.gather_rows(o.abs_rot, targets.pair_u),
                                     t.gather_rows(o.abs_rot, targets.pair_v));
        Var l_rot = t.add(t.mean_all(t.abs_(t.sub(pred_rel, gt_pair_rot))),
                          t.mean_all(t.abs_(t.sub(o.rel_rot, gt_edge_rot))));

        auto consistency = [&](Var trans) {
            Var tu = t.gather_rows(trans, targets.pair_u);
            Var tv = t.gather_rows(trans, targets.pair_v);
            return t.mean_all(
                t.abs_(t.sub(t.sub(tu, t.rot9_apply(pred_rel, tv)), gt_pair_t)));
        };
        Var l_trans = t.add(t.add(consistency(o.t_refined), consistency(o.t_coarse)),
                            t.mean_all(t.abs_(t.sub(o.rel_t, gt_edge_t))));

        const double discount = std::pow(cfg.gamma, rounds - 1 - i);
        Var term = t.scale(t.add(l_rot, t.scale(l_trans, cfg.beta)), discount);
        total = i == 0 ? term : t.add(total, term);
    }
    return total;
}

SyncScene make_sync_scene(const PoseGraph& g, const std::vector<RigidPose>& gt_poses) {
    SyncScene scene;
    scene.inputs = make_inputs(g, spanning_init(g));
    scene.targets = make_targets(gt_poses, scene.inputs);
    return scene;
}

double train_sync(SyncNet& net, const std::vector<SyncScene>& dataset,
                  const SyncTrainConfig& cfg) {
    if (dataset.empty()) throw EmptyDataset("train_sync: empty dataset");
    AdamW opt;
    opt.base_lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.horizon = static_cast<int64_t>(dataset.size()) * cfg.epochs;
    if (!cfg.resume_state.empty() && std::ifstream(cfg.resume_state).good())
        opt.load(cfg.resume_state, net.store);
    const int start_epoch = static_cast<int>(opt.step_count / static_cast<int64_t>(dataset.size()));

    std::ofstream csv;
    if (!cfg.loss_csv.empty()) {
        csv.open(cfg.loss_csv, start_epoch > 0 ? std::ios::app : std::ios::out);
        if (start_epoch == 0) csv << "step,loss,lr\n";
    }

    double last_epoch_loss = 0.0;
    const int stop_epoch = cfg.stop_after_epochs > 0
                               ? std::min(cfg.epochs, start_epoch + cfg.stop_after_epochs)
                               : cfg.epochs;
    for (int epoch = start_epoch; epoch < stop_epoch; ++epoch) {
        // Per-epoch derived shuffle stream so resumed runs replay the same
        // scene order.
        Rng shuffle_rng(derive_seed(cfg.seed, 0xe0c + epoch));
        std::vector<int> order(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
        double epoch_loss = 0.0;
        for (int idx : order) {
            const SyncScene& scene = dataset[idx];
            net.store.zero_grad();
            Tape t;
            auto outs = net.run_network(t, scene.inputs, cfg.iterations, true);
            Var loss = motion_loss(t, outs, scene.targets, cfg.loss);
            t.backward(loss);
            const double lv = t.value(loss).data[0];
            if (csv.is_open()) csv << opt.step_count << "," << lv << "," << opt.current_lr() << "\n";
            opt.step(net.store);
            epoch_loss += lv;
        }
        last_epoch_loss = epoch_loss / static_cast<double>(dataset.size());
    }
    if (!cfg.checkpoint.empty()) net.save(cfg.checkpoint);
    if (!cfg.resume_state.empty()) opt.save(cfg.resume_state, net.store);
    return last_epoch_loss;
}

std::vector<RigidPose> sync_register(const SyncNet& net, const PoseGraph& g, int iterations) {
    const GraphInputs inputs = make_inputs(g, spanning_init(g));
    Tape t;
    const auto outs = net.run_network(t, inputs, iterations, false);
    const IterOutput& last = outs.back();
    const Tensor& rot = t.value(last.abs_rot);
    const Tensor& trans = t.value(last.t_refined);
    std::vector<RigidPose> poses;
    for (int u = 0; u < inputs.n_nodes; ++u) {
        RigidPose p;
        p.R = unflatten_rotation(rot, u);
        p.t = Vec3(trans.at(u, 0), trans.at(u, 1), trans.at(u, 2));
        poses.push_back(p);
    }
    return poses;
}

}  // namespace mvreg
