#pragma once

#include <array>
#include <string>
#include <vector>

#include "mvreg/matching.hpp"
#include "mvreg/syncnet.hpp"
#include "mvreg/synth.hpp"

namespace mvreg {

struct InvalidConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CountMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingCheckpoint : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline failure wrapped with the stage it came from; what() is
// "[stage] original message".
struct StageError : std::runtime_error {
    std::string stage;

    StageError(const std::string& stage_name, const std::string& msg)
        : std::runtime_error("[" + stage_name + "] " + msg), stage(stage_name) {}
};

// One JSON file drives a run; CLI flags mirror these keys and override them.
struct RunConfig {
    std::string profile = "indoor";  // indoor: RR gate 0.2 m, outdoor: 0.5 m
    uint64_t seed = 0;

    std::array<double, 4> ecdf_thresholds = {0.25, 0.30, 0.35, 0.40};
    int k = 10;           // top-k graph density
    double tau = 0.07;    // RANSAC inlier threshold, meters
    double kappa = 0.01;  // plane inlier threshold, meters
    int iterations = 4;   // sync-net message-passing rounds T
    double gamma = 0.8;   // loss iteration discount
    double beta = 0.2;    // translation loss weight
    int dim = 64;         // network width d

    double overlap_lr = 0.01;
    double sync_lr = 0.001;
    double weight_decay = 1e-4;
    int overlap_epochs = 1;
    int sync_epochs = 15;
    int ransac_iterations = 1024;

    std::string overlap_checkpoint;
    std::string sync_checkpoint;
    std::string out_dir;
    bool dump_intermediates = false;
};

// Throws InvalidConfig on violated invariants (positive thresholds,
// iterations >= 1, gamma in (0,1], known profile, ...).
void validate(const RunConfig& cfg);

// JSON round trip; serialize(parse(s)) == s byte for byte.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
void save_config(const std::string& path, const RunConfig& cfg);
RunConfig load_config(const std::string& path);

// RR translation gate by profile: indoor 0.2 m, outdoor 0.5 m.
double profile_te_threshold(const std::string& profile);

inline constexpr std::array<double, 5> kReBucketsDeg = {3.0, 5.0, 10.0, 30.0, 45.0};
inline constexpr std::array<double, 5> kTeBuckets = {0.05, 0.10, 0.25, 0.50, 0.75};

struct EvalReport {
    int n_poses = 0;
    double te_threshold = 0.2;  // RR translation gate, meters
    double re_gate_deg = 15.0;  // RR rotation gate (harness choice, recorded)

    std::vector<double> re_deg;  // per ordered pair (u,v), u != v, row-major
    std::vector<double> te;

    double rr = 0;                   // te <= te_threshold AND re <= re_gate
    double rr_translation_only = 0;  // te <= te_threshold
    std::array<double, 5> re_ecdf = {};  // fraction of pairs below kReBucketsDeg
    std::array<double, 5> te_ecdf = {};  // fraction of pairs below kTeBuckets
    double mean_re = 0, median_re = 0;
    double mean_te = 0, median_te = 0;
};

// Relative-pose errors over all ordered pairs of T_u ∘ T_v⁻¹ against the
// ground-truth relatives; gauge-invariant by construction. Throws
// CountMismatch on unequal pose counts, EmptyInput below 2 poses.
EvalReport evaluate(const std::vector<RigidPose>& pred, const std::vector<RigidPose>& gt,
                    double te_threshold, double re_gate_deg = 15.0);

void save_report(const std::string& path, const EvalReport& r);
EvalReport load_report(const std::string& path);

// Aligned text table / CSV over named reports plus a mean row. Throws
// EmptyInput when no reports are given.
std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& reports);
std::string report_csv(const std::vector<std::pair<std::string, EvalReport>>& reports);

struct PipelineResult {
    PoseGraph graph;
    SpanningInit init;
    std::vector<RigidPose> poses;         // final: regressed R, refined t
    std::vector<RigidPose> coarse_poses;  // regressed R, coarse t
    EvalReport report;                    // filled when gt poses are supplied
    bool has_report = false;
};

// Back half of the pipeline: spanning-tree init -> sync-net -> translation
// refinement -> (optional) evaluation. Stage failures surface as StageError.
// With cfg.dump_intermediates and a nonempty cfg.out_dir, each stage's
// artifact is written under out_dir.
PipelineResult run_pipeline(const PoseGraph& g, const SyncNet& net, const RunConfig& cfg,
                            const std::vector<RigidPose>* gt_poses = nullptr);

// Front half: match -> stats -> overlap prediction -> top-k -> RANSAC /
// Procrustes -> ICR / IPR, producing the sparse measured pose graph.
PoseGraph graph_from_descriptors(const std::vector<DescriptorSet>& frames,
                                 const OverlapNet& overlap_net, const RunConfig& cfg);

}  // namespace mvreg
