#include "mvreg/posegraph.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>

#include <json.hpp>

namespace mvreg {

void PoseGraph::add_undirected(int u, int v, const RelMeasure& m, double reverse_icr) {
    if (u == v) throw std::runtime_error("posegraph: self-loop");
    RelMeasure rev = m;
    rev.transform = inverse(m.transform);
    if (reverse_icr >= 0) rev.icr = reverse_icr;
    edges.push_back({u, v, m});
    edges.push_back({v, u, rev});
}

std::vector<std::vector<int>> PoseGraph::adjacency() const {
    std::vector<std::vector<int>> adj(n_nodes);
    for (const Edge& e : edges) adj[e.u].push_back(e.v);
    return adj;
}

const PoseGraph::Edge* PoseGraph::find_edge(int u, int v) const {
    for (const Edge& e : edges)
        if (e.u == u && e.v == v) return &e;
    return nullptr;
}

bool PoseGraph::connected() const {
    if (n_nodes == 0) return false;
    auto adj = adjacency();
    std::vector<char> seen(n_nodes, 0);
    std::queue<int> q;
    q.push(0);
    seen[0] = 1;
    int count = 1;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (int v : adj[u])
            if (!seen[v]) {
                seen[v] = 1;
                ++count;
                q.push(v);
            }
    }
    return count == n_nodes;
}

namespace {

nlohmann::ordered_json pose_to_json(const RigidPose& p) {
    nlohmann::ordered_json j;
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) r[3 * i + k] = p.R(i, k);
    j["R"] = r;
    j["t"] = std::vector<double>{p.t.x(), p.t.y(), p.t.z()};
    return j;
}

RigidPose pose_from_json(const nlohmann::json& j) {
    RigidPose p;
    const auto& r = j.at("R");
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) p.R(i, k) = r.at(3 * i + k).get<double>();
    const auto& t = j.at("t");
    p.t = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    return p;
}

}  // namespace

void save_posegraph(const std::string& path, const PoseGraph& g) {
    nlohmann::ordered_json j;
    j["nodes"] = g.n_nodes;
    j["edges"] = nlohmann::ordered_json::array();
    for (const PoseGraph::Edge& e : g.edges) {
        nlohmann::ordered_json pose = pose_to_json(e.m.transform);
        nlohmann::ordered_json je;
        je["u"] = e.u;
        je["v"] = e.v;
        je["R"] = pose["R"];
        je["t"] = pose["t"];
        je["overlap"] = e.m.overlap;
        je["icr"] = e.m.icr;
        je["ipr"] = e.m.ipr;
        j["edges"].push_back(je);
    }
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

PoseGraph load_posegraph(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    is >> j;
    PoseGraph g;
    g.n_nodes = j.at("nodes").get<int>();
    for (const auto& je : j.at("edges")) {
        PoseGraph::Edge e;
        e.u = je.at("u").get<int>();
        e.v = je.at("v").get<int>();
        e.m.transform = pose_from_json(je);
        e.m.overlap = je.at("overlap").get<double>();
        e.m.icr = je.at("icr").get<double>();
        e.m.ipr = je.at("ipr").get<double>();
        g.edges.push_back(e);
    }
    return g;
}

void save_poses(const std::string& path, const std::vector<RigidPose>& poses) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const RigidPose& p : poses) j.push_back(pose_to_json(p));
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

std::vector<RigidPose> load_poses(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    is >> j;
    std::vector<RigidPose> poses;
    for (const auto& jp : j) poses.push_back(pose_from_json(jp));
    return poses;
}

std::vector<std::pair<int, int>> select_topk(const Eigen::MatrixXd& overlap, int k) {
    const int n = static_cast<int>(overlap.rows());
    if (k < 1 || k > n - 1) throw KTooLarge("select_topk: k out of range");
    Eigen::MatrixXd sym = (overlap + overlap.transpose()) / 2.0;
    std::set<std::pair<int, int>> picked;
    for (int u = 0; u < n; ++u) {
        std::vector<int> partners;
        for (int v = 0; v < n; ++v)
            if (v != u) partners.push_back(v);
        std::stable_sort(partners.begin(), partners.end(), [&](int a, int b) {
            if (sym(u, a) != sym(u, b)) return sym(u, a) > sym(u, b);
            return a < b;
        });
        for (int i = 0; i < k; ++i) {
            const int v = partners[i];
            picked.insert({std::min(u, v), std::max(u, v)});
        }
    }
    return {picked.begin(), picked.end()};
}

RansacResult ransac_register(const CorrespondenceSet& c, const DescriptorSet& a,
                             const DescriptorSet& b, const RansacConfig& cfg) {
    const int n = static_cast<int>(c.size());
    if (n < 3) throw InsufficientCorrespondence("ransac_register: need >= 3 correspondences");

    std::vector<Vec3> pa(n), pb(n);
    for (int i = 0; i < n; ++i) {
        pa[i] = a.keypoints.row(c.pairs[i].first).transpose();
        pb[i] = b.keypoints.row(c.pairs[i].second).transpose();
    }

    Rng rng(cfg.seed);
    int best_count = 0;
    double best_mean_residual = 1e300;
    RigidPose best_pose;
    std::vector<double> w3(3, 1.0);
    for (int it = 0; it < cfg.iterations; ++it) {
        int i0 = static_cast<int>(rng.uniform_int(0, n - 1));
        int i1 = static_cast<int>(rng.uniform_int(0, n - 1));
        int i2 = static_cast<int>(rng.uniform_int(0, n - 1));
        if (i0 == i1 || i0 == i2 || i1 == i2) continue;
        RigidPose hyp;
        try {
            hyp = kabsch({pb[i0], pb[i1], pb[i2]}, {pa[i0], pa[i1], pa[i2]}, w3);
        } catch (const DegenerateConfiguration&) {
            continue;
        }
        int count = 0;
        double sum_res = 0;
        for (int i = 0; i < n; ++i) {
            const double r = (pa[i] - (hyp.R * pb[i] + hyp.t)).norm();
            if (r < cfg.tau) {
                ++count;
                sum_res += r;
            }
        }
        if (count > best_count ||
            (count == best_count && count > 0 && sum_res / count < best_mean_residual)) {
            best_count = count;
            best_mean_residual = count > 0 ? sum_res / count : 1e300;
            best_pose = hyp;
        }
    }
    if (best_count < 3) throw NoConsensus("ransac_register: consensus below 3 inliers");

    // Procrustes refinement: weighted Kabsch on the consensus set.
    RansacResult res;
    std::vector<Vec3> src, dst;
    std::vector<double> w;
    for (int i = 0; i < n; ++i) {
        if ((pa[i] - (best_pose.R * pb[i] + best_pose.t)).norm() < cfg.tau) {
            src.push_back(pb[i]);
            dst.push_back(pa[i]);
            w.push_back(1.0);
        }
    }
    res.pose = kabsch(src, dst, w);
    res.inlier.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        if ((pa[i] - (res.pose.R * pb[i] + res.pose.t)).norm() < cfg.tau) {
            res.inlier[i] = 1;
            ++res.inlier_count;
        }
    }
    return res;
}

double compute_icr(const CorrespondenceSet& c, const DescriptorSet& a,
                   const DescriptorSet& b, const RigidPose& t, double tau) {
    int count = 0;
    for (size_t i = 0; i < c.size(); ++i) {
        const Vec3 pu = a.keypoints.row(c.pairs[i].first).transpose();
        const Vec3 pv = b.keypoints.row(c.pairs[i].second).transpose();
        if ((pu - (t.R * pv + t.t)).norm() < tau) ++count;
    }
    return static_cast<double>(count) / static_cast<double>(a.size());
}

double compute_ipr(const std::vector<Vec3>& points, double kappa, uint64_t seed) {
    const int n = static_cast<int>(points.size());
    if (n < 3) return 1.0;
    Rng rng(seed);
    constexpr int kIters = 512;
    int best = 0;
    for (int it = 0; it < kIters; ++it) {
        const int i0 = static_cast<int>(rng.uniform_int(0, n - 1));
        const int i1 = static_cast<int>(rng.uniform_int(0, n - 1));
        const int i2 = static_cast<int>(rng.uniform_int(0, n - 1));
        if (i0 == i1 || i0 == i2 || i1 == i2) continue;
        const Vec3 normal = (points[i1] - points[i0]).cross(points[i2] - points[i0]);
        const double nn = normal.norm();
        if (nn < 1e-12) continue;
        const Vec3 unit = normal / nn;
        const double d = unit.dot(points[i0]);
        int count = 0;
        for (const Vec3& p : points)
            if (std::abs(unit.dot(p) - d) < kappa) ++count;
        best = std::max(best, count);
    }
    return static_cast<double>(best) / static_cast<double>(n);
}

namespace {

// Union-find with path compression for Kruskal.
struct UnionFind {
    std::vector<int> id, sz;

    explicit UnionFind(int n) : id(n), sz(n, 1) { std::iota(id.begin(), id.end(), 0); }

    int root(int i) {
        while (i != id[i]) {
            id[i] = id[id[i]];
            i = id[i];
        }
        return i;
    }
    bool unite(int p, int q) {
        int a = root(p), b = root(q);
        if (a == b) return false;
        if (sz[a] < sz[b]) std::swap(a, b);
        id[b] = a;
        sz[a] += sz[b];
        return true;
    }
};

}  // namespace

SpanningInit spanning_init(const PoseGraph& g) {
    if (!g.connected()) throw DisconnectedGraph("spanning_init: graph not connected");
    const int n = g.n_nodes;

    // Collect undirected edges with symmetric priority s = o * (icr_uv + icr_vu)/2.
    struct UEdge {
        int u, v;
        double s;
    };
    std::vector<UEdge> uedges;
    for (const PoseGraph::Edge& e : g.edges) {
        if (e.u >= e.v) continue;
        const PoseGraph::Edge* rev = g.find_edge(e.v, e.u);
        const double icr_rev = rev ? rev->m.icr : e.m.icr;
        uedges.push_back({e.u, e.v, e.m.overlap * (e.m.icr + icr_rev) / 2.0});
    }
    std::stable_sort(uedges.begin(), uedges.end(), [](const UEdge& a, const UEdge& b) {
        if (a.s != b.s) return a.s > b.s;
        if (a.u != b.u) return a.u < b.u;
        return a.v < b.v;
    });

    SpanningInit init;
    UnionFind uf(n);
    std::vector<std::vector<std::pair<int, double>>> tree(n);  // (neighbor, s)
    for (const UEdge& e : uedges) {
        if (uf.unite(e.u, e.v)) {
            tree[e.u].emplace_back(e.v, e.s);
            tree[e.v].emplace_back(e.u, e.s);
            init.tree_edges.emplace_back(e.u, e.v);
            init.total_priority += e.s;
        }
    }

    // Tree center: minimum hop eccentricity, ties to lower index.
    auto bfs_depths = [&](int src) {
        std::vector<int> depth(n, -1);
        std::queue<int> q;
        q.push(src);
        depth[src] = 0;
        while (!q.empty()) {
            const int u = q.front();
            q.pop();
            for (auto [v, s] : tree[u])
                if (depth[v] < 0) {
                    depth[v] = depth[u] + 1;
                    q.push(v);
                }
        }
        return depth;
    };
    int best_root = 0, best_ecc = n + 1;
    for (int u = 0; u < n; ++u) {
        const auto depth = bfs_depths(u);
        const int ecc = *std::max_element(depth.begin(), depth.end());
        if (ecc < best_ecc) {
            best_ecc = ecc;
            best_root = u;
        }
    }
    init.root = best_root;

    // Chain poses outward: child v of parent u gets T_v = T_uv⁻¹ ∘ T_u.
    init.pose.assign(n, RigidPose::identity());
    init.hop.assign(n, -1);
    init.priority.assign(n, 1.0);
    init.hop[best_root] = 0;
    std::queue<int> q;
    q.push(best_root);
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        for (auto [v, s] : tree[u]) {
            if (init.hop[v] >= 0) continue;
            const PoseGraph::Edge* e = g.find_edge(u, v);
            init.pose[v] = compose(inverse(e->m.transform), init.pose[u]);
            init.hop[v] = init.hop[u] + 1;
            init.priority[v] = init.priority[u] * s;
            q.push(v);
        }
    }
    return init;
}

}  // namespace mvreg
