#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvreg {

// Dense 2-D row-major tensor. All network math runs in f64; checkpoint
// files store f32 payloads (see ParamStore::save/load).
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    static Tensor zeros(int r, int c) { return Tensor(r, c); }
    static Tensor full(int r, int c, double v) {
        Tensor t(r, c);
        t.fill(v);
        return t;
    }
};

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG shared by init, synthesis and RANSAC.
struct Rng {
    std::mt19937_64 gen;

    explicit Rng(uint64_t seed = 0) : gen(seed) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen);
    }
    double normal(double mean, double stddev) {
        return std::normal_distribution<double>(mean, stddev)(gen);
    }
    // Inclusive bounds.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen);
    }
    int poisson(double lambda) {
        return std::poisson_distribution<int>(lambda)(gen);
    }
};

// Derive a child seed from (parent seed, index) without mutating state.
uint64_t derive_seed(uint64_t parent, uint64_t index);

}  // namespace mvreg
