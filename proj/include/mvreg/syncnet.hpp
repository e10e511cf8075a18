#pragma once

#include <string>
#include <vector>

#include "mvreg/nn.hpp"
#include "mvreg/posegraph.hpp"

namespace mvreg {

struct IsolatedNode : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SingularSystem : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Graph measurements flattened into batched tensors: one row per node or per
// directed edge, in graph storage order.
struct GraphInputs {
    int n_nodes = 0;
    int root = 0;
    std::vector<int> src, dst;  // directed edges, graph.edges order
    Tensor edge_rot;            // [E,9] row-major R_uv
    Tensor edge_t;              // [E,3] t_uv
    Tensor edge_conf;           // [E,3] (o, ICR, IPR)
    Tensor node_rot;            // [N,9] spanning-tree init rotation
    Tensor node_t;              // [N,3] init translation
    Tensor node_meta;           // [N,2] (hop/max_hop, cumulative priority)

    int n_edges() const { return static_cast<int>(src.size()); }
};

GraphInputs make_inputs(const PoseGraph& g, const SpanningInit& init);

// Rotation, translation and confidence features per node and directed edge.
struct FeatureState {
    Var node_rot, node_t, node_conf;  // [N,64] each
    Var edge_rot, edge_t, edge_conf;  // [E,64] each
};

enum class Stream { rotation, translation };

// One regression round: absolute poses, auxiliary relatives, edge weights.
struct IterOutput {
    Var abs_rot;    // [N,9]
    Var t_coarse;   // [N,3]
    Var t_refined;  // [N,3]
    Var rel_rot;    // [E,9]
    Var rel_t;      // [E,3]
    Var weight;     // [E,1] positive
};

// Row-wise differentiable Gram-Schmidt: [n,6] -> [n,9] rotations (row-major).
Var sixd_to_rot9(Tape& t, Var x);

// Per-stream update parameters; the same set is reused every iteration.
struct StreamParams {
    Mlp mix;                           // [H_v ; H_uv (; Hhat_R_uv)] -> d
    Dense wq, wk;                      // confidence-attention projections
    Dense wf, wc;                      // value paths: feature and confidence
    GruCell abs_gru;                   // hidden [H_u ; H_C_u], input [msg ; conf msg]
    LayerNorm ln_node_h, ln_node_c;
    Mlp rel_f, rel_c;                  // edge fusion inputs
    GruCell rel_gru;
    LayerNorm ln_edge_h, ln_edge_c;

    StreamParams() = default;
    StreamParams(ParamStore& s, const std::string& prefix, int mix_in, Rng& rng);
};

class SyncNet {
public:
    static constexpr int kDim = 64;
    static constexpr int kIterations = 4;

    ParamStore store;

    explicit SyncNet(uint64_t seed = 0);

    FeatureState init_features(Tape& t, const GraphInputs& g) const;
    // Updates the stream's node features and the confidence node features.
    // The translation stream additionally mixes in the already-updated
    // rotation edge features.
    void absolute_update(Tape& t, const GraphInputs& g, FeatureState& s, Stream stream) const;
    void relative_update(Tape& t, const GraphInputs& g, FeatureState& s, Stream stream) const;

    // Regression heads + least-squares translation refinement on the
    // current state.
    IterOutput regress(Tape& t, const GraphInputs& g, const FeatureState& s) const;

    // T iterations of (2x absolute, 1x relative) per stream, rotation before
    // translation. regress_each=true returns all T regressions (training);
    // otherwise only the final one.
    std::vector<IterOutput> run_network(Tape& t, const GraphInputs& g, int iterations,
                                        bool regress_each) const;

    void save(const std::string& path) const { store.save(path); }
    void load(const std::string& path) { store.load(path); }

private:
    Mlp in_edge_rot_, in_edge_t_, in_edge_conf_;
    Mlp in_node_rot_, in_node_t_, in_node_conf_;
    StreamParams rot_, trans_;
    Mlp head_abs_rot_, head_abs_t_, head_rel_rot_, head_rel_t_, head_weight_;
};

// Eq.-6 style refinement: weighted least squares over delta corrections with
// the root anchored at zero; differentiable through the normal-equation solve.
Var refine_translations(Tape& t, const GraphInputs& g, Var abs_rot, Var t_coarse, Var weight);

// Ground-truth targets for the loss, precomputed over all ordered pairs.
struct MotionTargets {
    std::vector<int> pair_u, pair_v;  // all n^2 ordered pairs
    Tensor pair_rot;                  // [n^2,9] gt R_uv
    Tensor pair_t;                    // [n^2,3] gt t_uv
    Tensor edge_rot;                  // [E,9] gt relatives on graph edges
    Tensor edge_t;                    // [E,3]
};

MotionTargets make_targets(const std::vector<RigidPose>& gt_poses, const GraphInputs& g);

struct LossConfig {
    double gamma = 0.8;  // iteration discount
    double beta = 0.2;   // translation weight
};

// Discounted rotation + translation consistency losses with auxiliary
// relative terms; scalar output.
Var motion_loss(Tape& t, const std::vector<IterOutput>& iters, const MotionTargets& targets,
                const LossConfig& cfg);

struct SyncTrainConfig {
    double lr = 0.001;
    double weight_decay = 1e-4;
    int epochs = 15;
    // Stop after this many epochs within this call (0 = run to `epochs`).
    // Models an interrupted run: the lr schedule still spans all `epochs`,
    // and a later call with resume_state picks up where this one left off.
    int stop_after_epochs = 0;
    int iterations = SyncNet::kIterations;
    uint64_t seed = 0;
    LossConfig loss;
    std::string loss_csv;
    std::string checkpoint;
    std::string resume_state;  // optimizer state path for resumable runs
};

struct SyncScene {
    GraphInputs inputs;
    MotionTargets targets;
};

SyncScene make_sync_scene(const PoseGraph& g, const std::vector<RigidPose>& gt_poses);

// One graph per optimizer step, AdamW + cosine schedule over all epochs.
// Returns the final-epoch mean loss.
double train_sync(SyncNet& net, const std::vector<SyncScene>& dataset,
                  const SyncTrainConfig& cfg);

// Inference: spanning-tree init, T iterations, single final regression.
// Returns absolute poses (refined translations), root-gauged.
std::vector<RigidPose> sync_register(const SyncNet& net, const PoseGraph& g,
                                     int iterations = SyncNet::kIterations);

}  // namespace mvreg
