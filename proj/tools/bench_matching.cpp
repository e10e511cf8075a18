// Compares the OpenMP mutual-matching kernel against the serial reference
// implementation: verifies identical output, reports wall times and speedup.

#include <chrono>
#include <cstdio>

#include "mvreg/matching.hpp"

using namespace mvreg;
using Clock = std::chrono::steady_clock;

namespace {

DescriptorSet random_set(int n, int dim, Rng& rng) {
    DescriptorSet s;
    s.keypoints.resize(n, 3);
    s.descriptors.resize(n, dim);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < 3; ++j) s.keypoints(i, j) = rng.uniform(-3, 3);
        for (int j = 0; j < dim; ++j) s.descriptors(i, j) = rng.normal(0, 1);
    }
    s.normalize_descriptors();
    return s;
}

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

int main() {
    constexpr int kDim = 32;
    constexpr int kReps = 3;
    Rng rng(7);

    std::printf("%8s %12s %12s %9s %8s\n", "n", "serial(ms)", "openmp(ms)", "speedup",
                "equal");
    bool all_equal = true;
    for (int n : {250, 500, 1000, 2000, 4000}) {
        const DescriptorSet a = random_set(n, kDim, rng);
        const DescriptorSet b = random_set(n, kDim, rng);

        double t_serial = 0, t_parallel = 0;
        bool equal = true;
        for (int r = 0; r < kReps; ++r) {
            auto t0 = Clock::now();
            const CorrespondenceSet cs = mutual_match_serial(a, b);
            t_serial += ms_since(t0);

            t0 = Clock::now();
            const CorrespondenceSet cp = mutual_match(a, b);
            t_parallel += ms_since(t0);

            equal = equal && cs.pairs == cp.pairs && cs.distances == cp.distances;
        }
        all_equal = all_equal && equal;
        std::printf("%8d %12.2f %12.2f %8.2fx %8s\n", n, t_serial / kReps,
                    t_parallel / kReps, t_serial / t_parallel, equal ? "yes" : "NO");
    }
    return all_equal ? 0 : 1;
}
