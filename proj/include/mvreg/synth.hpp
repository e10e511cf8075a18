#pragma once

#include <string>
#include <vector>

#include "mvreg/posegraph.hpp"

namespace mvreg {

struct UnknownProfile : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SceneSpec {
    int n_frames_min = 10;
    int n_frames_max = 10;
    double rot_noise_deg = 5.0;     // half-normal angle sigma
    double trans_noise = 0.1;       // isotropic gaussian sigma, meters
    double outlier_fraction = 0.2;  // p_out
    int k = 10;                     // target extra-edge density
    uint64_t seed = 0;
};

struct SyntheticScene {
    std::vector<RigidPose> gt_poses;
    PoseGraph graph;
    std::vector<char> outlier;  // per stored directed edge, aligned with graph.edges

    RigidPose gt_relative(int u, int v) const {
        return relative_pose(gt_poses[u], gt_poses[v]);
    }
};

// Random global transforms (Euler angles in [-180°,180°], translations in
// [-6,6] per axis), random connected graph, inlier edges perturbed by
// half-normal axis-angle + gaussian translation noise, outlier edges fresh
// random transforms. Confidence attributes planted per inlier/outlier
// profile. Deterministic in spec.seed.
SyntheticScene gen_scene(const SceneSpec& spec);

// (MatchStats, planted overlap) pairs whose distance statistics follow the
// qualitative overlap relationship: counts grow and mean distances shrink
// with overlap, distance spread peaks at mid overlap.
std::vector<std::pair<MatchStats, double>> gen_stats_dataset(int n_samples, uint64_t seed);

// Draw one correspondence-distance sample for a given planted overlap.
MatchStats gen_stats_for_overlap(double overlap, Rng& rng);

struct BenchmarkSuite {
    std::string name;
    std::vector<SceneSpec> specs;
};

// Frozen suites: easy (N=10, 2°, 0.05 m, p=0.1), standard (N=30, 5°, 0.1 m,
// p=0.2), hard (N=40, 10°, 0.2 m, p=0.4); 50 scenes each, fixed seeds.
BenchmarkSuite gen_benchmark_suite(const std::string& profile);

// Scene serialization: pose-graph JSON + gt-poses JSON + outlier-label JSON.
void save_scene(const std::string& prefix, const SyntheticScene& scene);

}  // namespace mvreg
