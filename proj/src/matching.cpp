#include "mvreg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace mvreg {

void DescriptorSet::normalize_descriptors() {
    for (int i = 0; i < descriptors.rows(); ++i) {
        const double n = descriptors.row(i).norm();
        if (n > 0) descriptors.row(i) /= n;
    }
}

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("descriptor file: unexpected EOF");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32(os, u);
}

float read_f32(std::istream& is) {
    uint32_t u = read_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace

void save_descriptors(const std::string& path, const DescriptorSet& set) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("MDSC", 4);
    write_u32(os, 1);
    write_u32(os, static_cast<uint32_t>(set.keypoints.rows()));
    write_u32(os, static_cast<uint32_t>(set.descriptors.cols()));
    for (int i = 0; i < set.keypoints.rows(); ++i)
        for (int j = 0; j < 3; ++j) write_f32(os, static_cast<float>(set.keypoints(i, j)));
    for (int i = 0; i < set.descriptors.rows(); ++i)
        for (int j = 0; j < set.descriptors.cols(); ++j)
            write_f32(os, static_cast<float>(set.descriptors(i, j)));
}

DescriptorSet load_descriptors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MDSC", 4) != 0)
        throw std::runtime_error("bad magic in " + path);
    if (read_u32(is) != 1) throw std::runtime_error("bad version in " + path);
    const int n = static_cast<int>(read_u32(is));
    const int d = static_cast<int>(read_u32(is));
    DescriptorSet set;
    set.keypoints.resize(n, 3);
    set.descriptors.resize(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) set.keypoints(i, j) = read_f32(is);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) set.descriptors(i, j) = read_f32(is);
    set.normalize_descriptors();
    return set;
}

namespace {

// Nearest neighbor of each row of `from` among rows of `to`; ties go to the
// lower index.
std::vector<int> nearest_rows(const Eigen::MatrixXd& from, const Eigen::MatrixXd& to,
                              bool parallel) {
    std::vector<int> nn(from.rows());
#pragma omp parallel for schedule(static) if (parallel)
    for (int i = 0; i < from.rows(); ++i) {
        int best = 0;
        double best_d = (to.row(0) - from.row(i)).squaredNorm();
        for (int j = 1; j < to.rows(); ++j) {
            const double d = (to.row(j) - from.row(i)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        nn[i] = best;
    }
    return nn;
}

CorrespondenceSet mutual_match_impl(const DescriptorSet& a, const DescriptorSet& b,
                                    bool parallel) {
    if (a.size() == 0 || b.size() == 0)
        throw std::runtime_error("mutual_match: empty descriptor set");
    const std::vector<int> a_to_b = nearest_rows(a.descriptors, b.descriptors, parallel);
    const std::vector<int> b_to_a = nearest_rows(b.descriptors, a.descriptors, parallel);
    CorrespondenceSet c;
    for (int i = 0; i < a.size(); ++i) {
        const int j = a_to_b[i];
        if (b_to_a[j] == i) {
            c.pairs.emplace_back(i, j);
            c.distances.push_back((a.descriptors.row(i) - b.descriptors.row(j)).norm());
        }
    }
    return c;
}

}  // namespace

CorrespondenceSet mutual_match(const DescriptorSet& a, const DescriptorSet& b) {
    return mutual_match_impl(a, b, true);
}

CorrespondenceSet mutual_match_serial(const DescriptorSet& a, const DescriptorSet& b) {
    return mutual_match_impl(a, b, false);
}

MatchStats compute_stats(const CorrespondenceSet& c) {
    MatchStats s;
    if (c.distances.empty()) return s;  // sentinel
    const size_t n = c.distances.size();
    s.count = static_cast<double>(n);
    // Accumulate over the sorted copy so the stats are bit-identical under
    // permutation of the correspondence order.
    std::vector<double> sorted = c.distances;
    std::sort(sorted.begin(), sorted.end());
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
    s.median = sorted[(n - 1) / 2];  // lower middle for even counts
    double var = 0;
    for (double d : sorted) var += (d - s.mean) * (d - s.mean);
    s.stddev = std::sqrt(var / n);
    for (size_t k = 0; k < kEcdfThresholds.size(); ++k) {
        const auto it = std::upper_bound(sorted.begin(), sorted.end(), kEcdfThresholds[k]);
        s.ecdf[k] = static_cast<double>(it - sorted.begin()) / n;
    }
    return s;
}

OverlapNet::OverlapNet(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x0f));
    proj = Dense(store, "proj", kInputDim, kDim, rng);
    for (int i = 0; i < 3; ++i) {
        expand[i] = Dense(store, "block" + std::to_string(i) + ".expand", kDim, 4 * kDim, rng);
        compress[i] = Dense(store, "block" + std::to_string(i) + ".compress", 4 * kDim, kDim, rng);
    }
    head = Mlp(store, "head", kDim, kDim, 1, rng);
    // Zero output layer: initial logit 0 -> prediction 0.5, so the sigmoid
    // starts on its linear part instead of a saturated tail.
    head.l2.W->value.fill(0.0);
    head.l2.b->value.fill(0.0);
}

Tensor OverlapNet::stats_to_input(const MatchStats& s) const {
    Tensor x(1, kInputDim);
    x.data = {std::log1p(s.count) / std::log1p(count_cap),
              s.mean,
              s.median,
              s.stddev,
              s.ecdf[0],
              s.ecdf[1],
              s.ecdf[2],
              s.ecdf[3]};
    return x;
}

Var OverlapNet::forward(Tape& t, Var x) const {
    Var h = t.relu(proj(t, x));
    for (int i = 0; i < 3; ++i)
        h = t.add(h, compress[i](t, t.relu(expand[i](t, h))));
    return t.sigmoid(head(t, h));
}

double OverlapNet::predict(const MatchStats& s) const {
    if (s.empty_sentinel()) return 0.0;  // no matches, no usable pair
    Tape t;
    Var out = forward(t, t.input(stats_to_input(s)));
    return t.value(out).data[0];
}

double train_overlap(OverlapNet& net,
                     const std::vector<std::pair<MatchStats, double>>& dataset,
                     const OverlapTrainConfig& cfg) {
    if (dataset.empty()) throw EmptyDataset("train_overlap: empty dataset");
    AdamW opt;
    opt.base_lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    const int steps_per_epoch =
        static_cast<int>((dataset.size() + cfg.batch_size - 1) / cfg.batch_size);
    opt.horizon = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;

    std::ofstream csv;
    if (!cfg.loss_csv.empty()) {
        csv.open(cfg.loss_csv);
        csv << "step,loss,lr\n";
    }

    Rng shuffle_rng(derive_seed(cfg.seed, 0x5e));
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    double last_epoch_loss = 0.0;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
        double epoch_loss = 0.0;
        for (int s = 0; s < steps_per_epoch; ++s) {
            const size_t lo = static_cast<size_t>(s) * cfg.batch_size;
            const size_t hi = std::min(lo + cfg.batch_size, dataset.size());
            Tensor x(static_cast<int>(hi - lo), OverlapNet::kInputDim);
            Tensor y(static_cast<int>(hi - lo), 1);
            for (size_t k = lo; k < hi; ++k) {
                const Tensor xi = net.stats_to_input(dataset[order[k]].first);
                std::copy(xi.data.begin(), xi.data.end(),
                          x.data.begin() + (k - lo) * OverlapNet::kInputDim);
                y.at(static_cast<int>(k - lo), 0) = dataset[order[k]].second;
            }
            net.store.zero_grad();
            Tape t;
            Var pred = net.forward(t, t.input(x));
            Var loss = t.mean_all(t.smooth_l1(t.sub(pred, t.input(y))));
            t.backward(loss);
            const double lv = t.value(loss).data[0];
            if (csv.is_open()) csv << step << "," << lv << "," << opt.current_lr() << "\n";
            opt.step(net.store);
            epoch_loss += lv;
            ++step;
        }
        last_epoch_loss = epoch_loss / steps_per_epoch;
    }
    if (!cfg.checkpoint.empty()) net.save(cfg.checkpoint);
    return last_epoch_loss;
}

}  // namespace mvreg
