#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mvreg/tape.hpp"

namespace mvreg {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Owns named parameters. Creation order is the optimizer iteration order,
// so runs are reproducible.
class ParamStore {
public:
    Param& create(const std::string& name, int rows, int cols);
    // Kaiming-style uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    Param& create_kaiming(const std::string& name, int rows, int cols, Rng& rng);
    Param& get(const std::string& name);
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Param*> all();
    void zero_grad();

    // "MDGD" weight checkpoint: little-endian, f32 payload.
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, size_t> index_;
};

struct Dense {
    Param* W = nullptr;
    Param* b = nullptr;

    Dense() = default;
    Dense(ParamStore& s, const std::string& prefix, int in, int out, Rng& rng);
    Var operator()(Tape& t, Var x) const;
};

// dense -> ReLU -> dense, linear output.
struct Mlp {
    Dense l1, l2;

    Mlp() = default;
    Mlp(ParamStore& s, const std::string& prefix, int in, int hidden, int out, Rng& rng);
    Var operator()(Tape& t, Var x) const;
};

struct LayerNorm {
    Param* gain = nullptr;
    Param* bias = nullptr;

    LayerNorm() = default;
    LayerNorm(ParamStore& s, const std::string& prefix, int dim);
    Var operator()(Tape& t, Var x) const;
};

// z = σ(x Wxz + h Whz + bz), r = σ(x Wxr + h Whr + br),
// h̃ = tanh(x Wxh + (r⊙h) Whh + bh), h' = (1-z)⊙h + z⊙h̃.
struct GruCell {
    Dense xz, hz, xr, hr, xh, hh;

    GruCell() = default;
    GruCell(ParamStore& s, const std::string& prefix, int in, int dim, Rng& rng);
    Var operator()(Tape& t, Var h, Var x) const;
};

// q:[1,d], k:[m,d], v:[m,dv] -> softmax(q·kᵀ/√d)·v.
Var softmax_attention(Tape& t, Var q, Var k, Var v);

// AdamW with decoupled weight decay and cosine-annealed learning rate.
struct AdamW {
    double base_lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    int64_t horizon = 1000;  // cosine schedule length in steps
    int64_t step_count = 0;

    double current_lr() const;
    void step(ParamStore& store);

    // Serialized alongside checkpoints for resume support.
    void save(const std::string& path, const ParamStore& store) const;
    void load(const std::string& path, ParamStore& store);

private:
    std::map<std::string, Tensor> m_, v_;
    friend class ParamStore;
};

}  // namespace mvreg
