#pragma once

#include <string>
#include <vector>

#include "mvreg/geometry.hpp"
#include "mvreg/matching.hpp"

namespace mvreg {

struct KTooLarge : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InsufficientCorrespondence : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NoConsensus : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DisconnectedGraph : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RelMeasure {
    RigidPose transform;
    double overlap = 0;  // o_uv in [0,1]
    double icr = 0;      // inlier correspondence ratio
    double ipr = 0;      // inlier plane ratio
};

// Directed edges; every stored edge (u,v) has its reverse (v,u) with the
// inverse transform.
struct PoseGraph {
    struct Edge {
        int u = 0;
        int v = 0;
        RelMeasure m;
    };

    int n_nodes = 0;
    std::vector<Edge> edges;

    // Stores (u,v,m) and (v,u,inverse). reverse_icr applies to the (v,u)
    // direction; by default both directions get the same ICR.
    void add_undirected(int u, int v, const RelMeasure& m, double reverse_icr = -1.0);
    std::vector<std::vector<int>> adjacency() const;  // neighbor node lists
    const Edge* find_edge(int u, int v) const;
    bool connected() const;
};

// JSON pose-graph and poses files (field names fixed by the wire format).
void save_posegraph(const std::string& path, const PoseGraph& g);
PoseGraph load_posegraph(const std::string& path);
void save_poses(const std::string& path, const std::vector<RigidPose>& poses);
std::vector<RigidPose> load_poses(const std::string& path);

// Union over rows of each node's k highest-overlap partners on the
// symmetrized matrix; ties broken by lower partner index. Returns
// deduplicated undirected pairs (u < v).
std::vector<std::pair<int, int>> select_topk(const Eigen::MatrixXd& overlap, int k);

struct RansacConfig {
    double tau = 0.07;   // inlier residual threshold, meters
    int iterations = 1024;
    uint64_t seed = 0;
};

struct RansacResult {
    RigidPose pose;
    std::vector<char> inlier;  // per correspondence
    int inlier_count = 0;
};

// Minimal 3-point Kabsch hypotheses over the correspondence set, consensus
// by inlier count (ties by lower mean residual), then weighted-Kabsch
// (Procrustes) refinement on the final inliers.
RansacResult ransac_register(const CorrespondenceSet& c, const DescriptorSet& a,
                             const DescriptorSet& b, const RansacConfig& cfg);

// Eq.-faithful ICR: inlier correspondences divided by |F_u| (the keypoint
// count of frame u), not |C|.
double compute_icr(const CorrespondenceSet& c, const DescriptorSet& a,
                   const DescriptorSet& b, const RigidPose& t, double tau);

// Largest-plane inlier fraction via seeded 3-point RANSAC (512 iterations).
// Fewer than 3 points returns 1.0: a degenerate pair is suspicious.
double compute_ipr(const std::vector<Vec3>& points, double kappa, uint64_t seed = 0);

struct SpanningInit {
    int root = 0;
    std::vector<RigidPose> pose;      // per node, root = identity
    std::vector<int> hop;             // hops to root along the tree
    std::vector<double> priority;     // cumulative product of s_uv to root
    std::vector<std::pair<int, int>> tree_edges;  // undirected (u<v)
    double total_priority = 0;        // sum of s over tree edges
};

// Maximum-spanning tree on s_uv = o_uv * (ICR_uv + ICR_vu)/2, rooted at the
// tree center (minimum hop eccentricity, ties to the lower index), poses
// chained outward from an identity root.
SpanningInit spanning_init(const PoseGraph& g);

}  // namespace mvreg
