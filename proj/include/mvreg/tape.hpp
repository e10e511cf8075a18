#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvreg/tensor.hpp"

namespace mvreg {

struct NonScalarLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tape;

// Handle to a tape node.
struct Var {
    int id = -1;
    int rows = 0;
    int cols = 0;
};

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Reverse-mode tape. Nodes are appended in topological order; backward()
// sweeps in reverse and accumulates exact gradients into bound Params.
class Tape {
public:
    Var input(Tensor value);
    Var param(Param& p);

    // Elementwise / broadcast.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_rowvec(Var a, Var row);   // row: [1,c] broadcast over rows
    Var mul_col(Var a, Var col);      // col: [r,1] broadcast over cols
    Var div_col(Var a, Var col);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var tanh_(Var a);
    Var softplus(Var a);
    Var sqrt_(Var a);
    Var abs_(Var a);
    Var smooth_l1(Var a);

    // Linear algebra.
    Var matmul(Var a, Var b);            // [r,k]x[k,c]
    Var matmul_tn(Var a, Var b);         // aᵀ·b, a:[k,r] b:[k,c]
    Var matmul_nt(Var a, Var b);         // a·bᵀ, a:[r,k] b:[c,k]
    Var row_dot(Var a, Var b);           // [r,c],[r,c] -> [r,1]
    Var cross3(Var a, Var b);            // [r,3],[r,3] -> [r,3]
    Var rot9_mul_nt(Var a, Var b);       // per-row 3x3: A·Bᵀ, [r,9]
    Var rot9_apply(Var r9, Var v);       // per-row R·v, [r,9],[r,3] -> [r,3]
    Var rot9_applyT(Var r9, Var v);      // per-row Rᵀ·v
    Var solve(Var a, Var b);             // x with a·x = b, a square full-rank

    // Structure.
    Var concat_cols(const std::vector<Var>& parts);
    Var slice_cols(Var a, int c0, int c1);
    Var select_cols(Var a, const std::vector<int>& idx);
    Var reshape(Var a, int r, int c);
    Var gather_rows(Var a, const std::vector<int>& idx);
    Var scatter_rows(Var a, const std::vector<int>& idx, int out_rows);
    Var segment_sum(Var a, const std::vector<int>& seg, int n_segments);
    // Accumulate per-row 3x3 blocks (row-major 9-vectors) into a dense
    // [3*n_rows, 3*n_cols] matrix at block positions (brow[k], bcol[k]).
    Var block_assemble(Var blocks, const std::vector<int>& brow, const std::vector<int>& bcol,
                       int n_rows, int n_cols);
    Var segment_softmax(Var logits, const std::vector<int>& seg, int n_segments);
    Var softmax(Var a);                  // row-wise
    Var layernorm(Var a, Var gain, Var bias);  // row-wise, eps 1e-5

    // Reductions.
    Var sum_all(Var a);
    Var mean_all(Var a);

    void backward(Var loss);

    const Tensor& value(Var v) const { return nodes_[v.id].val; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&, Node&)> back;  // may be empty for leaves
        Param* bound = nullptr;
    };

    Var push(Tensor val, std::function<void(Tape&, Node&)> back);
    Node& node(Var v) { return nodes_[v.id]; }

    std::vector<Node> nodes_;
};

}  // namespace mvreg
