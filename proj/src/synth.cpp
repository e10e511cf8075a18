#include "mvreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace mvreg {

namespace {

Mat3 random_euler_rotation(Rng& rng) {
    const double a = rng.uniform(-M_PI, M_PI);
    const double b = rng.uniform(-M_PI, M_PI);
    const double c = rng.uniform(-M_PI, M_PI);
    return (Eigen::AngleAxisd(a, Vec3::UnitZ()) * Eigen::AngleAxisd(b, Vec3::UnitY()) *
            Eigen::AngleAxisd(c, Vec3::UnitX()))
        .toRotationMatrix();
}

RigidPose random_transform(Rng& rng) {
    return {random_euler_rotation(rng),
            Vec3(rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-6, 6))};
}

Vec3 random_unit(Rng& rng) {
    while (true) {
        Vec3 v(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1));
        const double n = v.norm();
        if (n > 1e-6) return v / n;
    }
}

// Random connected graph: a random spanning tree plus extra edges until the
// average degree approaches k.
std::vector<std::pair<int, int>> random_connected_edges(int n, int k, Rng& rng) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, i)]);
    std::set<std::pair<int, int>> edges;
    for (int i = 1; i < n; ++i) {
        const int u = order[i];
        const int v = order[rng.uniform_int(0, i - 1)];
        edges.insert({std::min(u, v), std::max(u, v)});
    }
    const size_t target = std::min(static_cast<size_t>(n) * k / 2,
                                   static_cast<size_t>(n) * (n - 1) / 2);
    int guard = 0;
    while (edges.size() < target && guard < 100 * n * k) {
        ++guard;
        const int u = static_cast<int>(rng.uniform_int(0, n - 1));
        const int v = static_cast<int>(rng.uniform_int(0, n - 1));
        if (u != v) edges.insert({std::min(u, v), std::max(u, v)});
    }
    return {edges.begin(), edges.end()};
}

}  // namespace

SyntheticScene gen_scene(const SceneSpec& spec) {
    Rng rng(spec.seed);
    SyntheticScene scene;
    const int n = static_cast<int>(rng.uniform_int(spec.n_frames_min, spec.n_frames_max));
    for (int i = 0; i < n; ++i) scene.gt_poses.push_back(random_transform(rng));

    scene.graph.n_nodes = n;
    const auto pairs = random_connected_edges(n, spec.k, rng);
    const double sigma_r = spec.rot_noise_deg * M_PI / 180.0;
    for (auto [u, v] : pairs) {
        const bool is_outlier = rng.uniform(0, 1) < spec.outlier_fraction;
        RelMeasure m;
        double reverse_icr;
        if (is_outlier) {
            m.transform = random_transform(rng);
            m.overlap = rng.uniform(0.05, 0.45);
            m.icr = rng.uniform(0.0, 0.15);
            reverse_icr = rng.uniform(0.0, 0.15);
            m.ipr = rng.uniform(0.4, 1.0);  // plane-dominated failure profile
        } else {
            const RigidPose gt_rel = scene.gt_relative(u, v);
            const double angle = sigma_r > 0 ? std::abs(rng.normal(0.0, sigma_r)) : 0.0;
            const Mat3 noise_rot = axis_angle_rotation(random_unit(rng), angle);
            m.transform.R = noise_rot * gt_rel.R;
            m.transform.t = gt_rel.t;
            if (spec.trans_noise > 0)
                m.transform.t += Vec3(rng.normal(0, spec.trans_noise),
                                      rng.normal(0, spec.trans_noise),
                                      rng.normal(0, spec.trans_noise));
            m.overlap = rng.uniform(0.35, 0.9);
            m.icr = rng.uniform(0.2, 0.6) * m.overlap;
            reverse_icr = rng.uniform(0.2, 0.6) * m.overlap;
            m.ipr = rng.uniform(0.05, 0.5);
        }
        scene.graph.add_undirected(u, v, m, reverse_icr);
        scene.outlier.push_back(is_outlier);
        scene.outlier.push_back(is_outlier);
    }
    return scene;
}

MatchStats gen_stats_for_overlap(double overlap, Rng& rng) {
    // Count grows with overlap; mean distance shrinks; spread is bell-shaped
    // in overlap (maximal mixing of good/bad matches at mid overlap).
    const double lambda = 20.0 + 800.0 * overlap;
    const int count = std::max(1, rng.poisson(lambda));
    const double mean_d = 0.45 - 0.30 * overlap;
    const double spread = 0.03 + 0.10 * std::exp(-std::pow((overlap - 0.5) / 0.25, 2));
    CorrespondenceSet c;
    c.pairs.resize(count, {0, 0});
    c.distances.reserve(count);
    for (int i = 0; i < count; ++i)
        c.distances.push_back(std::clamp(rng.normal(mean_d, spread), 0.0, 1.4142));
    return compute_stats(c);
}

std::vector<std::pair<MatchStats, double>> gen_stats_dataset(int n_samples, uint64_t seed) {
    if (n_samples < 1) throw std::runtime_error("gen_stats_dataset: n_samples < 1");
    std::vector<std::pair<MatchStats, double>> out;
    out.reserve(n_samples);
    for (int i = 0; i < n_samples; ++i) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        const double o = rng.uniform(0.0, 1.0);
        out.emplace_back(gen_stats_for_overlap(o, rng), o);
    }
    return out;
}

BenchmarkSuite gen_benchmark_suite(const std::string& profile) {
    BenchmarkSuite suite;
    suite.name = profile;
    SceneSpec base;
    uint64_t suite_seed;
    if (profile == "easy") {
        base.n_frames_min = base.n_frames_max = 10;
        base.rot_noise_deg = 2.0;
        base.trans_noise = 0.05;
        base.outlier_fraction = 0.1;
        suite_seed = 0xea51;
    } else if (profile == "standard") {
        base.n_frames_min = base.n_frames_max = 30;
        base.rot_noise_deg = 5.0;
        base.trans_noise = 0.1;
        base.outlier_fraction = 0.2;
        suite_seed = 0x57a0;
    } else if (profile == "hard") {
        base.n_frames_min = base.n_frames_max = 40;
        base.rot_noise_deg = 10.0;
        base.trans_noise = 0.2;
        base.outlier_fraction = 0.4;
        suite_seed = 0xda4d;
    } else {
        throw UnknownProfile("unknown benchmark profile: " + profile);
    }
    base.k = 10;
    for (int i = 0; i < 50; ++i) {
        SceneSpec s = base;
        s.seed = derive_seed(suite_seed, static_cast<uint64_t>(i));
        suite.specs.push_back(s);
    }
    return suite;
}

void save_scene(const std::string& prefix, const SyntheticScene& scene) {
    save_posegraph(prefix + ".graph.json", scene.graph);
    save_poses(prefix + ".gt_poses.json", scene.gt_poses);
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (size_t i = 0; i < scene.graph.edges.size(); ++i) {
        nlohmann::ordered_json je;
        je["u"] = scene.graph.edges[i].u;
        je["v"] = scene.graph.edges[i].v;
        je["outlier"] = static_cast<bool>(scene.outlier[i]);
        j.push_back(je);
    }
    std::ofstream os(prefix + ".outliers.json");
    if (!os) throw std::runtime_error("cannot open for write: " + prefix + ".outliers.json");
    os << j.dump(2) << "\n";
}

}  // namespace mvreg
