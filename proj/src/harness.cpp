#include "mvreg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mvreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

void fail_if(bool bad, const std::string& msg) {
    if (bad) throw InvalidConfig(msg);
}

// Lower middle element for even counts, matching compute_stats' convention.
double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const size_t mid = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    return v[mid];
}

std::ofstream open_for_write(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    return os;
}

}  // namespace

void validate(const RunConfig& cfg) {
    for (double e : cfg.ecdf_thresholds) fail_if(e <= 0, "ecdf thresholds must be positive");
    fail_if(!std::is_sorted(cfg.ecdf_thresholds.begin(), cfg.ecdf_thresholds.end()),
            "ecdf thresholds must be nondecreasing");
    fail_if(cfg.k < 1, "k must be >= 1");
    fail_if(cfg.tau <= 0, "tau must be positive");
    fail_if(cfg.kappa <= 0, "kappa must be positive");
    fail_if(cfg.iterations < 1, "iterations must be >= 1");
    fail_if(cfg.gamma <= 0 || cfg.gamma > 1, "gamma must be in (0,1]");
    fail_if(cfg.beta < 0, "beta must be nonnegative");
    fail_if(cfg.dim < 1, "dim must be >= 1");
    fail_if(cfg.overlap_lr <= 0 || cfg.sync_lr <= 0, "learning rates must be positive");
    fail_if(cfg.weight_decay < 0, "weight decay must be nonnegative");
    fail_if(cfg.overlap_epochs < 1 || cfg.sync_epochs < 1, "epochs must be >= 1");
    fail_if(cfg.ransac_iterations < 1, "ransac iterations must be >= 1");
    profile_te_threshold(cfg.profile);  // throws UnknownProfile
}

double profile_te_threshold(const std::string& profile) {
    if (profile == "indoor") return 0.2;
    if (profile == "outdoor") return 0.5;
    throw UnknownProfile("unknown profile: " + profile + " (expected indoor|outdoor)");
}

std::string config_to_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["profile"] = cfg.profile;
    j["seed"] = cfg.seed;
    j["ecdf_thresholds"] = cfg.ecdf_thresholds;
    j["k"] = cfg.k;
    j["tau"] = cfg.tau;
    j["kappa"] = cfg.kappa;
    j["iterations"] = cfg.iterations;
    j["gamma"] = cfg.gamma;
    j["beta"] = cfg.beta;
    j["dim"] = cfg.dim;
    j["overlap_lr"] = cfg.overlap_lr;
    j["sync_lr"] = cfg.sync_lr;
    j["weight_decay"] = cfg.weight_decay;
    j["overlap_epochs"] = cfg.overlap_epochs;
    j["sync_epochs"] = cfg.sync_epochs;
    j["ransac_iterations"] = cfg.ransac_iterations;
    j["overlap_checkpoint"] = cfg.overlap_checkpoint;
    j["sync_checkpoint"] = cfg.sync_checkpoint;
    j["out_dir"] = cfg.out_dir;
    j["dump_intermediates"] = cfg.dump_intermediates;
    return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("config parse error: ") + e.what());
    }
    RunConfig cfg;
    try {
        j.at("profile").get_to(cfg.profile);
        j.at("seed").get_to(cfg.seed);
        j.at("ecdf_thresholds").get_to(cfg.ecdf_thresholds);
        j.at("k").get_to(cfg.k);
        j.at("tau").get_to(cfg.tau);
        j.at("kappa").get_to(cfg.kappa);
        j.at("iterations").get_to(cfg.iterations);
        j.at("gamma").get_to(cfg.gamma);
        j.at("beta").get_to(cfg.beta);
        j.at("dim").get_to(cfg.dim);
        j.at("overlap_lr").get_to(cfg.overlap_lr);
        j.at("sync_lr").get_to(cfg.sync_lr);
        j.at("weight_decay").get_to(cfg.weight_decay);
        j.at("overlap_epochs").get_to(cfg.overlap_epochs);
        j.at("sync_epochs").get_to(cfg.sync_epochs);
        j.at("ransac_iterations").get_to(cfg.ransac_iterations);
        j.at("overlap_checkpoint").get_to(cfg.overlap_checkpoint);
        j.at("sync_checkpoint").get_to(cfg.sync_checkpoint);
        j.at("out_dir").get_to(cfg.out_dir);
        j.at("dump_intermediates").get_to(cfg.dump_intermediates);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("config field error: ") + e.what());
    }
    validate(cfg);
    return cfg;
}

void save_config(const std::string& path, const RunConfig& cfg) {
    open_for_write(path) << config_to_json(cfg);
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidConfig("cannot open config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return config_from_json(ss.str());
}

EvalReport evaluate(const std::vector<RigidPose>& pred, const std::vector<RigidPose>& gt,
                    double te_threshold, double re_gate_deg) {
    if (pred.size() != gt.size())
        throw CountMismatch("evaluate: " + std::to_string(pred.size()) + " predictions vs " +
                            std::to_string(gt.size()) + " ground-truth poses");
    const int n = static_cast<int>(pred.size());
    if (n < 2) throw EmptyInput("evaluate: need at least 2 poses");

    EvalReport r;
    r.n_poses = n;
    r.te_threshold = te_threshold;
    r.re_gate_deg = re_gate_deg;

    int ok = 0, ok_t = 0;
    for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
            if (u == v) continue;
            const RigidPose p = relative_pose(pred[u], pred[v]);
            const RigidPose g = relative_pose(gt[u], gt[v]);
            const double re = rotation_error(p.R, g.R) * 180.0 / kPi;
            const double e_t = translation_error(p.t, g.t);
            r.re_deg.push_back(re);
            r.te.push_back(e_t);
            if (e_t <= te_threshold) {
                ++ok_t;
                if (re <= re_gate_deg) ++ok;
            }
            for (size_t b = 0; b < kReBucketsDeg.size(); ++b)
                if (re <= kReBucketsDeg[b]) r.re_ecdf[b] += 1.0;
            for (size_t b = 0; b < kTeBuckets.size(); ++b)
                if (e_t <= kTeBuckets[b]) r.te_ecdf[b] += 1.0;
        }
    }
    const double n_pairs = static_cast<double>(r.re_deg.size());
    r.rr = ok / n_pairs;
    r.rr_translation_only = ok_t / n_pairs;
    for (double& b : r.re_ecdf) b /= n_pairs;
    for (double& b : r.te_ecdf) b /= n_pairs;
    r.mean_re = std::accumulate(r.re_deg.begin(), r.re_deg.end(), 0.0) / n_pairs;
    r.mean_te = std::accumulate(r.te.begin(), r.te.end(), 0.0) / n_pairs;
    r.median_re = median_of(r.re_deg);
    r.median_te = median_of(r.te);
    return r;
}

void save_report(const std::string& path, const EvalReport& r) {
    nlohmann::ordered_json j;
    j["n_poses"] = r.n_poses;
    j["te_threshold"] = r.te_threshold;
    j["re_gate_deg"] = r.re_gate_deg;
    j["rr"] = r.rr;
    j["rr_translation_only"] = r.rr_translation_only;
    j["mean_re"] = r.mean_re;
    j["median_re"] = r.median_re;
    j["mean_te"] = r.mean_te;
    j["median_te"] = r.median_te;
    j["re_bucket_deg"] = kReBucketsDeg;
    j["re_ecdf"] = r.re_ecdf;
    j["te_bucket"] = kTeBuckets;
    j["te_ecdf"] = r.te_ecdf;
    j["re_deg"] = r.re_deg;
    j["te"] = r.te;
    open_for_write(path) << j.dump(2) << "\n";
}

EvalReport load_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    is >> j;
    EvalReport r;
    j.at("n_poses").get_to(r.n_poses);
    j.at("te_threshold").get_to(r.te_threshold);
    j.at("re_gate_deg").get_to(r.re_gate_deg);
    j.at("rr").get_to(r.rr);
    j.at("rr_translation_only").get_to(r.rr_translation_only);
    j.at("mean_re").get_to(r.mean_re);
    j.at("median_re").get_to(r.median_re);
    j.at("mean_te").get_to(r.mean_te);
    j.at("median_te").get_to(r.median_te);
    j.at("re_ecdf").get_to(r.re_ecdf);
    j.at("te_ecdf").get_to(r.te_ecdf);
    j.at("re_deg").get_to(r.re_deg);
    j.at("te").get_to(r.te);
    return r;
}

namespace {

struct SummaryRow {
    std::string name;
    std::vector<double> cols;
};

const std::vector<std::string>& summary_headers() {
    static const std::vector<std::string> h = {
        "rr",     "rr_t",    "mean_re", "med_re", "mean_te", "med_te",
        "re<3",   "re<5",    "re<10",   "re<30",  "re<45",   "te<.05",
        "te<.10", "te<.25",  "te<.50",  "te<.75"};
    return h;
}

std::vector<double> summary_cols(const EvalReport& r) {
    std::vector<double> c = {r.rr,      r.rr_translation_only, r.mean_re,
                             r.median_re, r.mean_te,           r.median_te};
    c.insert(c.end(), r.re_ecdf.begin(), r.re_ecdf.end());
    c.insert(c.end(), r.te_ecdf.begin(), r.te_ecdf.end());
    return c;
}

std::vector<SummaryRow> summary_rows(
    const std::vector<std::pair<std::string, EvalReport>>& reports) {
    if (reports.empty()) throw EmptyInput("report: no reports given");
    std::vector<SummaryRow> rows;
    std::vector<double> mean(summary_headers().size(), 0.0);
    for (const auto& [name, rep] : reports) {
        rows.push_back({name, summary_cols(rep)});
        for (size_t i = 0; i < mean.size(); ++i) mean[i] += rows.back().cols[i];
    }
    for (double& m : mean) m /= static_cast<double>(reports.size());
    rows.push_back({"mean", mean});
    return rows;
}

}  // namespace

std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& reports) {
    const auto rows = summary_rows(reports);
    size_t name_w = 5;
    for (const auto& r : rows) name_w = std::max(name_w, r.name.size());

    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "scene" << std::right;
    for (const std::string& h : summary_headers()) os << std::setw(9) << h;
    os << "\n";
    os << std::fixed << std::setprecision(3);
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::right;
        for (double c : r.cols) os << std::setw(9) << c;
        os << "\n";
    }
    return os.str();
}

std::string report_csv(const std::vector<std::pair<std::string, EvalReport>>& reports) {
    const auto rows = summary_rows(reports);
    std::ostringstream os;
    os << "scene";
    for (const std::string& h : summary_headers()) os << "," << h;
    os << "\n";
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.name;
        for (double c : r.cols) os << "," << c;
        os << "\n";
    }
    return os.str();
}

namespace {

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

void dump_poses(const RunConfig& cfg, const std::string& file,
                const std::vector<RigidPose>& poses) {
    if (!cfg.dump_intermediates || cfg.out_dir.empty()) return;
    save_poses(cfg.out_dir + "/" + file, poses);
}

}  // namespace

PipelineResult run_pipeline(const PoseGraph& g, const SyncNet& net, const RunConfig& cfg,
                            const std::vector<RigidPose>* gt_poses) {
    validate(cfg);
    if (cfg.dump_intermediates && !cfg.out_dir.empty())
        std::filesystem::create_directories(cfg.out_dir);

    PipelineResult out;
    out.graph = g;
    if (cfg.dump_intermediates && !cfg.out_dir.empty())
        stage("graph", [&] { save_posegraph(cfg.out_dir + "/graph.json", g); });

    out.init = stage("spanning-init", [&] { return spanning_init(g); });
    dump_poses(cfg, "init_poses.json", out.init.pose);

    stage("sync-net", [&] {
        const GraphInputs inputs = make_inputs(g, out.init);
        Tape t;
        const auto iters = net.run_network(t, inputs, cfg.iterations, false);
        const IterOutput& last = iters.back();
        const Tensor& rot = t.value(last.abs_rot);
        const Tensor& coarse = t.value(last.t_coarse);
        const Tensor& refined = t.value(last.t_refined);
        for (int u = 0; u < inputs.n_nodes; ++u) {
            RigidPose p;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) p.R(i, j) = rot.at(u, 3 * i + j);
            p.t = Vec3(coarse.at(u, 0), coarse.at(u, 1), coarse.at(u, 2));
            out.coarse_poses.push_back(p);
            p.t = Vec3(refined.at(u, 0), refined.at(u, 1), refined.at(u, 2));
            out.poses.push_back(p);
        }
        return 0;
    });
    dump_poses(cfg, "coarse_poses.json", out.coarse_poses);
    dump_poses(cfg, "poses.json", out.poses);

    if (gt_poses) {
        out.report = stage("evaluate", [&] {
            return evaluate(out.poses, *gt_poses, profile_te_threshold(cfg.profile));
        });
        out.has_report = true;
        if (cfg.dump_intermediates && !cfg.out_dir.empty())
            stage("evaluate", [&] {
                save_report(cfg.out_dir + "/report.json", out.report);
                return 0;
            });
    }
    return out;
}

PoseGraph graph_from_descriptors(const std::vector<DescriptorSet>& frames,
                                 const OverlapNet& overlap_net, const RunConfig& cfg) {
    validate(cfg);
    const int n = static_cast<int>(frames.size());
    if (n < 2) throw EmptyInput("graph_from_descriptors: need at least 2 frames");
    if (cfg.dump_intermediates && !cfg.out_dir.empty())
        std::filesystem::create_directories(cfg.out_dir);

    // Match every unordered pair once and predict overlap from the distance
    // statistics; matching is symmetric so the matrix is too.
    std::vector<std::vector<CorrespondenceSet>> corr(n, std::vector<CorrespondenceSet>(n));
    Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(n, n);
    stage("match-overlap", [&] {
        for (int u = 0; u < n; ++u) {
            for (int v = u + 1; v < n; ++v) {
                corr[u][v] = mutual_match(frames[u], frames[v]);
                const MatchStats s = compute_stats(corr[u][v]);
                overlap(u, v) = overlap(v, u) = s.empty_sentinel()
                                                    ? 0.0
                                                    : overlap_net.predict(s);
            }
        }
        return 0;
    });
    if (cfg.dump_intermediates && !cfg.out_dir.empty()) {
        nlohmann::ordered_json j;
        for (int u = 0; u < n; ++u) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (int v = 0; v < n; ++v) row.push_back(overlap(u, v));
            j["overlap"].push_back(row);
        }
        open_for_write(cfg.out_dir + "/overlap.json") << j.dump(2) << "\n";
    }

    const auto pairs = stage("top-k", [&] { return select_topk(overlap, cfg.k); });

    PoseGraph g;
    g.n_nodes = n;
    stage("pairwise-registration", [&] {
        for (const auto& [u, v] : pairs) {
            RansacConfig rc;
            rc.tau = cfg.tau;
            rc.iterations = cfg.ransac_iterations;
            rc.seed = derive_seed(cfg.seed, static_cast<uint64_t>(u) * n + v);
            RansacResult res;
            try {
                res = ransac_register(corr[u][v], frames[u], frames[v], rc);
            } catch (const InsufficientCorrespondence&) {
                continue;  // unregistrable pair: drop the candidate edge
            } catch (const NoConsensus&) {
                continue;
            }

            RelMeasure m;
            m.transform = res.pose;
            m.overlap = overlap(u, v);
            // ICR normalizes the shared inlier count by the source frame's
            // keypoint count, so the reverse direction only rescales.
            m.icr = compute_icr(corr[u][v], frames[u], frames[v], res.pose, cfg.tau);
            const double rev_icr =
                m.icr * frames[u].size() / std::max(1, frames[v].size());

            std::vector<Vec3> inlier_pts;
            for (size_t i = 0; i < corr[u][v].size(); ++i)
                if (res.inlier[i])
                    inlier_pts.push_back(frames[u].keypoints.row(corr[u][v].pairs[i].first));
            m.ipr = compute_ipr(inlier_pts, cfg.kappa, rc.seed);
            g.add_undirected(u, v, m, rev_icr);
        }
        return 0;
    });
    if (cfg.dump_intermediates && !cfg.out_dir.empty())
        stage("pairwise-registration",
              [&] { save_posegraph(cfg.out_dir + "/measured_graph.json", g); return 0; });
    return g;
}

}  // namespace mvreg
