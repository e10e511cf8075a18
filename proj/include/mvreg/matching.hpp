#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mvreg/nn.hpp"

namespace mvreg {

struct EmptyDataset : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Keypoints with unit-norm descriptors; descriptors are re-normalized on
// construction/load.
struct DescriptorSet {
    Eigen::Matrix<double, Eigen::Dynamic, 3> keypoints;  // n x 3, meters
    Eigen::MatrixXd descriptors;                         // n x d_f

    int size() const { return static_cast<int>(keypoints.rows()); }
    void normalize_descriptors();
};

// "MDSC" descriptor file: magic, version u32, n u32, d_f u32, n*3 f32
// keypoints, n*d_f f32 descriptors, little-endian.
void save_descriptors(const std::string& path, const DescriptorSet& set);
DescriptorSet load_descriptors(const std::string& path);

struct CorrespondenceSet {
    std::vector<std::pair<int, int>> pairs;  // mutual nearest neighbors
    std::vector<double> distances;           // descriptor-space Euclidean

    size_t size() const { return pairs.size(); }
};

// OpenMP-parallel mutual nearest-neighbor matching; the serial double-loop
// is kept as the reference implementation and test oracle.
CorrespondenceSet mutual_match(const DescriptorSet& a, const DescriptorSet& b);
CorrespondenceSet mutual_match_serial(const DescriptorSet& a, const DescriptorSet& b);

inline constexpr std::array<double, 4> kEcdfThresholds = {0.25, 0.30, 0.35, 0.40};

struct MatchStats {
    double count = 0;   // |C_uv|
    double mean = 0;
    double median = 0;  // lower middle element for even counts
    double stddev = 0;  // population
    std::array<double, 4> ecdf = {0, 0, 0, 0};

    bool empty_sentinel() const { return count == 0; }
};

// Population statistics of the matching distances. An empty correspondence
// set yields the all-zero sentinel.
MatchStats compute_stats(const CorrespondenceSet& c);

// MLP projection + three inverted residual blocks + sigmoid regression head.
struct OverlapNet {
    static constexpr int kDim = 64;
    static constexpr int kInputDim = 8;

    ParamStore store;
    Dense proj;
    std::array<Dense, 3> expand;
    std::array<Dense, 3> compress;
    Mlp head;
    double count_cap = 5000.0;  // keypoint budget for log-scaling |C_uv|

    explicit OverlapNet(uint64_t seed = 0);

    // The 8-vector of Eq.-style inputs; count enters as
    // log(1+count)/log(1+count_cap).
    Tensor stats_to_input(const MatchStats& s) const;
    Var forward(Tape& t, Var x) const;  // x: [n,8] -> [n,1] in (0,1)
    double predict(const MatchStats& s) const;

    void save(const std::string& path) const { store.save(path); }
    void load(const std::string& path) { store.load(path); }
};

struct OverlapTrainConfig {
    double lr = 0.01;
    double weight_decay = 1e-4;
    int epochs = 1;
    int batch_size = 64;
    uint64_t seed = 0;
    std::string loss_csv;        // optional per-step loss log
    std::string checkpoint;      // optional output path
};

// Minimizes mean smooth-L1(pred - gt) with AdamW + cosine schedule.
// Returns the final mean epoch loss.
double train_overlap(OverlapNet& net,
                     const std::vector<std::pair<MatchStats, double>>& dataset,
                     const OverlapTrainConfig& cfg);

}  // namespace mvreg
