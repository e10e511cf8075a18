#include "mvreg/tape.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace mvreg {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

Map map(Tensor& t) { return Map(t.data.data(), t.rows, t.cols); }
CMap map(const Tensor& t) { return CMap(t.data.data(), t.rows, t.cols); }

void check(bool ok, const char* what) {
    if (!ok) throw ShapeMismatch(what);
}

}  // namespace

Var Tape::push(Tensor val, std::function<void(Tape&, Node&)> back) {
    Node n;
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    const Node& nn = nodes_.back();
    return {static_cast<int>(nodes_.size()) - 1, nn.val.rows, nn.val.cols};
}

Var Tape::input(Tensor value) { return push(std::move(value), {}); }

Var Tape::param(Param& p) {
    Var v = push(p.value, {});
    nodes_[v.id].bound = &p;
    return v;
}

Var Tape::add(Var a, Var b) {
    check(a.rows == b.rows && a.cols == b.cols, "add: shape");
    Tensor out = node(a).val;
    const Tensor& bv = node(b).val;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
            t.node(a).grad.data[i] += n.grad.data[i];
            t.node(b).grad.data[i] += n.grad.data[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    check(a.rows == b.rows && a.cols == b.cols, "sub: shape");
    Tensor out = node(a).val;
    const Tensor& bv = node(b).val;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
            t.node(a).grad.data[i] += n.grad.data[i];
            t.node(b).grad.data[i] -= n.grad.data[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    check(a.rows == b.rows && a.cols == b.cols, "mul: shape");
    Tensor out = node(a).val;
    const Tensor& bv = node(b).val;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        const Tensor& bv2 = t.node(b).val;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            t.node(a).grad.data[i] += n.grad.data[i] * bv2.data[i];
            t.node(b).grad.data[i] += n.grad.data[i] * av.data[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    Tensor out = node(a).val;
    for (double& x : out.data) x *= s;
    return push(std::move(out), [a, s](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i)
            t.node(a).grad.data[i] += n.grad.data[i] * s;
    });
}

Var Tape::add_rowvec(Var a, Var row) {
    check(row.rows == 1 && row.cols == a.cols, "add_rowvec: shape");
    Tensor out = node(a).val;
    const Tensor& rv = node(row).val;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out.at(i, j) += rv.at(0, j);
    return push(std::move(out), [a, row](Tape& t, Node& n) {
        Tensor& ga = t.node(a).grad;
        Tensor& gr = t.node(row).grad;
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) {
                ga.at(i, j) += n.grad.at(i, j);
                gr.at(0, j) += n.grad.at(i, j);
            }
    });
}

Var Tape::mul_col(Var a, Var col) {
    check(col.cols == 1 && col.rows == a.rows, "mul_col: shape");
    Tensor out = node(a).val;
    const Tensor& cv = node(col).val;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out.at(i, j) *= cv.at(i, 0);
    return push(std::move(out), [a, col](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        const Tensor& cv2 = t.node(col).val;
        Tensor& ga = t.node(a).grad;
        Tensor& gc = t.node(col).grad;
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) {
                ga.at(i, j) += n.grad.at(i, j) * cv2.at(i, 0);
                gc.at(i, 0) += n.grad.at(i, j) * av.at(i, j);
            }
    });
}

Var Tape::div_col(Var a, Var col) {
    check(col.cols == 1 && col.rows == a.rows, "div_col: shape");
    Tensor out = node(a).val;
    const Tensor& cv = node(col).val;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out.at(i, j) /= cv.at(i, 0);
    return push(std::move(out), [a, col](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        const Tensor& cv2 = t.node(col).val;
        Tensor& ga = t.node(a).grad;
        Tensor& gc = t.node(col).grad;
        for (int i = 0; i < n.grad.rows; ++i) {
            const double c = cv2.at(i, 0);
            for (int j = 0; j < n.grad.cols; ++j) {
                ga.at(i, j) += n.grad.at(i, j) / c;
                gc.at(i, 0) -= n.grad.at(i, j) * av.at(i, j) / (c * c);
            }
        }
    });
}

Var Tape::relu(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = x > 0.0 ? x : 0.0;
    return push(std::move(out), [a](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (av.data[i] > 0.0) t.node(a).grad.data[i] += n.grad.data[i];
    });
}

Var Tape::sigmoid(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
    return push(std::move(out), [a](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val.data[i];
            t.node(a).grad.data[i] += n.grad.data[i] * y * (1.0 - y);
        }
    });
}

Var Tape::tanh_(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = std::tanh(x);
    return push(std::move(out), [a](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.val.data[i];
            t.node(a).grad.data[i] += n.grad.data[i] * (1.0 - y * y);
        }
    });
}

Var Tape::softplus(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    return push(std::move(out), [a](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-av.data[i]));
            t.node(a).grad.data[i] += n.grad.data[i] * s;
        }
    });
}

Var Tape::sqrt_(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = std::sqrt(x);
    return push(std::move(out), [a](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i)
            t.node(a).grad.data[i] += n.grad.data[i] / (2.0 * n.val.data[i]);
    });
}

Var Tape::abs_(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data) x = std::abs(x);
    return push(std::move(out), [a](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double s = av.data[i] > 0.0 ? 1.0 : (av.data[i] < 0.0 ? -1.0 : 0.0);
            t.node(a).grad.data[i] += n.grad.data[i] * s;
        }
    });
}

Var Tape::smooth_l1(Var a) {
    Tensor out = node(a).val;
    for (double& x : out.data)
        x = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
    return push(std::move(out), [a](Tape& t, Node& n) {
        const Tensor& av = t.node(a).val;
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const double x = av.data[i];
            const double d = std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
            t.node(a).grad.data[i] += n.grad.data[i] * d;
        }
    });
}

Var Tape::matmul(Var a, Var b) {
    check(a.cols == b.rows, "matmul: inner dim");
    Tensor out(a.rows, b.cols);
    // Row-by-row so results are bit-stable under row permutation: Eigen's
    // blocked gemm uses different accumulation paths for panel vs leftover
    // rows, which would break exact graph-relabeling equivariance.
    {
        auto bm = map(node(b).val);
        auto am = map(node(a).val);
        auto om = map(out);
        for (int i = 0; i < a.rows; ++i) om.row(i) = am.row(i) * bm;
    }
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        auto ga = map(t.node(a).grad);
        auto gn = map(n.grad);
        auto bv = map(t.node(b).val);
        for (int i = 0; i < a.rows; ++i) ga.row(i) += gn.row(i) * bv.transpose();
        map(t.node(b).grad) += map(t.node(a).val).transpose() * map(n.grad);
    });
}

Var Tape::matmul_tn(Var a, Var b) {
    check(a.rows == b.rows, "matmul_tn: inner dim");
    Tensor out(a.cols, b.cols);
    map(out) = map(node(a).val).transpose() * map(node(b).val);
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        map(t.node(a).grad) += map(t.node(b).val) * map(n.grad).transpose();
        map(t.node(b).grad) += map(t.node(a).val) * map(n.grad);
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    check(a.cols == b.cols, "matmul_nt: inner dim");
    Tensor out(a.rows, b.rows);
    map(out) = map(node(a).val) * map(node(b).val).transpose();
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        map(t.node(a).grad) += map(n.grad) * map(t.node(b).val);
        map(t.node(b).grad) += map(n.grad).transpose() * map(t.node(a).val);
    });
}

Var Tape::row_dot(Var a, Var b) {
    check(a.rows == b.rows && a.cols == b.cols, "row_dot: shape");
    Tensor out(a.rows, 1);
    const Tensor& av = node(a).val;
    const Tensor& bv = node(b).val;
    for (int i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < a.cols; ++j) s += av.at(i, j) * bv.at(i, j);
        out.at(i, 0) = s;
    }
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        const Tensor& av2 = t.node(a).val;
        const Tensor& bv2 = t.node(b).val;
        for (int i = 0; i < av2.rows; ++i) {
            const double g = n.grad.at(i, 0);
            for (int j = 0; j < av2.cols; ++j) {
                t.node(a).grad.at(i, j) += g * bv2.at(i, j);
                t.node(b).grad.at(i, j) += g * av2.at(i, j);
            }
        }
    });
}

Var Tape::cross3(Var a, Var b) {
    check(a.cols == 3 && b.cols == 3 && a.rows == b.rows, "cross3: shape");
    Tensor out(a.rows, 3);
    const Tensor& av = node(a).val;
    const Tensor& bv = node(b).val;
    auto cross_into = [](const double* x, const double* y, double* z) {
        z[0] = x[1] * y[2] - x[2] * y[1];
        z[1] = x[2] * y[0] - x[0] * y[2];
        z[2] = x[0] * y[1] - x[1] * y[0];
    };
    for (int i = 0; i < a.rows; ++i)
        cross_into(&av.data[3 * i], &bv.data[3 * i], &out.data[3 * i]);
    return push(std::move(out), [a, b, cross_into](Tape& t, Node& n) {
        const Tensor& av2 = t.node(a).val;
        const Tensor& bv2 = t.node(b).val;
        double tmp[3];
        for (int i = 0; i < av2.rows; ++i) {
            // d/da <g, a×b> = b×g ; d/db = g×a
            cross_into(&bv2.data[3 * i], &n.grad.data[3 * i], tmp);
            for (int k = 0; k < 3; ++k) t.node(a).grad.data[3 * i + k] += tmp[k];
            cross_into(&n.grad.data[3 * i], &av2.data[3 * i], tmp);
            for (int k = 0; k < 3; ++k) t.node(b).grad.data[3 * i + k] += tmp[k];
        }
    });
}

namespace {
using M3 = Eigen::Matrix3d;
using M3Map = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>;
using M3MapMut = Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>;
using V3Map = Eigen::Map<const Eigen::Vector3d>;
using V3MapMut = Eigen::Map<Eigen::Vector3d>;
}  // namespace

Var Tape::rot9_mul_nt(Var a, Var b) {
    check(a.cols == 9 && b.cols == 9 && a.rows == b.rows, "rot9_mul_nt: shape");
    Tensor out(a.rows, 9);
    const Tensor& av = node(a).val;
    const Tensor& bv = node(b).val;
    for (int i = 0; i < a.rows; ++i) {
        M3MapMut(&out.data[9 * i]) =
            M3Map(&av.data[9 * i]) * M3Map(&bv.data[9 * i]).transpose();
    }
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        const Tensor& av2 = t.node(a).val;
        const Tensor& bv2 = t.node(b).val;
        for (int i = 0; i < av2.rows; ++i) {
            M3 g = M3Map(&n.grad.data[9 * i]);
            M3MapMut(&t.node(a).grad.data[9 * i]) += g * M3Map(&bv2.data[9 * i]);
            M3MapMut(&t.node(b).grad.data[9 * i]) +=
                g.transpose() * M3Map(&av2.data[9 * i]);
        }
    });
}

Var Tape::rot9_apply(Var r9, Var v) {
    check(r9.cols == 9 && v.cols == 3 && r9.rows == v.rows, "rot9_apply: shape");
    Tensor out(r9.rows, 3);
    const Tensor& rv = node(r9).val;
    const Tensor& vv = node(v).val;
    for (int i = 0; i < r9.rows; ++i)
        V3MapMut(&out.data[3 * i]) = M3Map(&rv.data[9 * i]) * V3Map(&vv.data[3 * i]);
    return push(std::move(out), [r9, v](Tape& t, Node& n) {
        const Tensor& rv2 = t.node(r9).val;
        const Tensor& vv2 = t.node(v).val;
        for (int i = 0; i < rv2.rows; ++i) {
            Eigen::Vector3d g = V3Map(&n.grad.data[3 * i]);
            M3MapMut(&t.node(r9).grad.data[9 * i]) +=
                g * V3Map(&vv2.data[3 * i]).transpose();
            V3MapMut(&t.node(v).grad.data[3 * i]) +=
                M3Map(&rv2.data[9 * i]).transpose() * g;
        }
    });
}

Var Tape::rot9_applyT(Var r9, Var v) {
    check(r9.cols == 9 && v.cols == 3 && r9.rows == v.rows, "rot9_applyT: shape");
    Tensor out(r9.rows, 3);
    const Tensor& rv = node(r9).val;
    const Tensor& vv = node(v).val;
    for (int i = 0; i < r9.rows; ++i)
        V3MapMut(&out.data[3 * i]) =
            M3Map(&rv.data[9 * i]).transpose() * V3Map(&vv.data[3 * i]);
    return push(std::move(out), [r9, v](Tape& t, Node& n) {
        const Tensor& rv2 = t.node(r9).val;
        const Tensor& vv2 = t.node(v).val;
        for (int i = 0; i < rv2.rows; ++i) {
            Eigen::Vector3d g = V3Map(&n.grad.data[3 * i]);
            // y = Rᵀv: dR = v·gᵀ, dv = R·g
            M3MapMut(&t.node(r9).grad.data[9 * i]) +=
                V3Map(&vv2.data[3 * i]) * g.transpose();
            V3MapMut(&t.node(v).grad.data[3 * i]) += M3Map(&rv2.data[9 * i]) * g;
        }
    });
}

Var Tape::solve(Var a, Var b) {
    check(a.rows == a.cols && a.rows == b.rows, "solve: shape");
    Tensor out(b.rows, b.cols);
    Eigen::PartialPivLU<EMat> lu(map(node(a).val));
    map(out) = lu.solve(map(node(b).val));
    return push(std::move(out), [a, b](Tape& t, Node& n) {
        Eigen::PartialPivLU<EMat> lu2(map(t.node(a).val).transpose());
        EMat gb = lu2.solve(map(n.grad));
        map(t.node(b).grad) += gb;
        map(t.node(a).grad) -= gb * map(n.val).transpose();
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_cols: empty");
    int cols = 0;
    const int rows = parts[0].rows;
    for (const Var& p : parts) {
        check(p.rows == rows, "concat_cols: rows");
        cols += p.cols;
    }
    Tensor out(rows, cols);
    int off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = node(p).val;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < p.cols; ++j) out.at(i, off + j) = pv.at(i, j);
        off += p.cols;
    }
    std::vector<Var> ps = parts;
    return push(std::move(out), [ps](Tape& t, Node& n) {
        int off2 = 0;
        for (const Var& p : ps) {
            Tensor& g = t.node(p).grad;
            for (int i = 0; i < n.grad.rows; ++i)
                for (int j = 0; j < p.cols; ++j) g.at(i, j) += n.grad.at(i, off2 + j);
            off2 += p.cols;
        }
    });
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    check(0 <= c0 && c0 < c1 && c1 <= a.cols, "slice_cols: range");
    Tensor out(a.rows, c1 - c0);
    const Tensor& av = node(a).val;
    for (int i = 0; i < a.rows; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
    return push(std::move(out), [a, c0](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) g.at(i, c0 + j) += n.grad.at(i, j);
    });
}

Var Tape::select_cols(Var a, const std::vector<int>& idx) {
    Tensor out(a.rows, static_cast<int>(idx.size()));
    const Tensor& av = node(a).val;
    for (int i = 0; i < a.rows; ++i)
        for (size_t j = 0; j < idx.size(); ++j) out.at(i, static_cast<int>(j)) = av.at(i, idx[j]);
    return push(std::move(out), [a, idx](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (int i = 0; i < n.grad.rows; ++i)
            for (size_t j = 0; j < idx.size(); ++j)
                g.at(i, idx[j]) += n.grad.at(i, static_cast<int>(j));
    });
}

Var Tape::reshape(Var a, int r, int c) {
    check(static_cast<size_t>(r) * c == node(a).val.size(), "reshape: size");
    Tensor out = node(a).val;
    out.rows = r;
    out.cols = c;
    return push(std::move(out), [a](Tape& t, Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i)
            t.node(a).grad.data[i] += n.grad.data[i];
    });
}

Var Tape::gather_rows(Var a, const std::vector<int>& idx) {
    Tensor out(static_cast<int>(idx.size()), a.cols);
    const Tensor& av = node(a).val;
    for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < a.cols; ++j) out.at(static_cast<int>(i), j) = av.at(idx[i], j);
    return push(std::move(out), [a, idx](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < n.grad.cols; ++j)
                g.at(idx[i], j) += n.grad.at(static_cast<int>(i), j);
    });
}

Var Tape::scatter_rows(Var a, const std::vector<int>& idx, int out_rows) {
    check(static_cast<int>(idx.size()) == a.rows, "scatter_rows: index count");
    Tensor out(out_rows, a.cols);
    const Tensor& av = node(a).val;
    for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < a.cols; ++j) out.at(idx[i], j) += av.at(static_cast<int>(i), j);
    return push(std::move(out), [a, idx](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < n.grad.cols; ++j)
                g.at(static_cast<int>(i), j) += n.grad.at(idx[i], j);
    });
}

Var Tape::block_assemble(Var blocks, const std::vector<int>& brow, const std::vector<int>& bcol,
                         int n_rows, int n_cols) {
    check(blocks.cols == 9, "block_assemble: blocks must be [k,9]");
    check(static_cast<int>(brow.size()) == blocks.rows &&
              static_cast<int>(bcol.size()) == blocks.rows,
          "block_assemble: index count");
    Tensor out(3 * n_rows, 3 * n_cols);
    const Tensor& bv = node(blocks).val;
    for (int k = 0; k < blocks.rows; ++k)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                out.at(3 * brow[k] + i, 3 * bcol[k] + j) += bv.at(k, 3 * i + j);
    return push(std::move(out), [blocks, brow, bcol](Tape& t, Node& n) {
        Tensor& g = t.node(blocks).grad;
        for (int k = 0; k < blocks.rows; ++k)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    g.at(k, 3 * i + j) += n.grad.at(3 * brow[k] + i, 3 * bcol[k] + j);
    });
}

Var Tape::segment_sum(Var a, const std::vector<int>& seg, int n_segments) {
    check(static_cast<int>(seg.size()) == a.rows, "segment_sum: index count");
    Tensor out(n_segments, a.cols);
    const Tensor& av = node(a).val;
    for (size_t i = 0; i < seg.size(); ++i)
        for (int j = 0; j < a.cols; ++j) out.at(seg[i], j) += av.at(static_cast<int>(i), j);
    return push(std::move(out), [a, seg](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (size_t i = 0; i < seg.size(); ++i)
            for (int j = 0; j < n.grad.cols; ++j)
                g.at(static_cast<int>(i), j) += n.grad.at(seg[i], j);
    });
}

Var Tape::segment_softmax(Var logits, const std::vector<int>& seg, int n_segments) {
    check(logits.cols == 1, "segment_softmax: logits must be [n,1]");
    check(static_cast<int>(seg.size()) == logits.rows, "segment_softmax: index count");
    const Tensor& lv = node(logits).val;
    std::vector<double> mx(n_segments, -1e300), z(n_segments, 0.0);
    for (size_t i = 0; i < seg.size(); ++i) mx[seg[i]] = std::max(mx[seg[i]], lv.data[i]);
    Tensor out(logits.rows, 1);
    for (size_t i = 0; i < seg.size(); ++i) {
        out.data[i] = std::exp(lv.data[i] - mx[seg[i]]);
        z[seg[i]] += out.data[i];
    }
    for (size_t i = 0; i < seg.size(); ++i) out.data[i] /= z[seg[i]];
    const int ns = n_segments;
    return push(std::move(out), [logits, seg, ns](Tape& t, Node& n) {
        std::vector<double> dot(ns, 0.0);
        for (size_t i = 0; i < seg.size(); ++i)
            dot[seg[i]] += n.grad.data[i] * n.val.data[i];
        Tensor& g = t.node(logits).grad;
        for (size_t i = 0; i < seg.size(); ++i)
            g.data[i] += n.val.data[i] * (n.grad.data[i] - dot[seg[i]]);
    });
}

Var Tape::softmax(Var a) {
    Tensor out = node(a).val;
    for (int i = 0; i < out.rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < out.cols; ++j) mx = std::max(mx, out.at(i, j));
        double z = 0.0;
        for (int j = 0; j < out.cols; ++j) {
            out.at(i, j) = std::exp(out.at(i, j) - mx);
            z += out.at(i, j);
        }
        for (int j = 0; j < out.cols; ++j) out.at(i, j) /= z;
    }
    return push(std::move(out), [a](Tape& t, Node& n) {
        Tensor& g = t.node(a).grad;
        for (int i = 0; i < n.grad.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n.grad.cols; ++j) dot += n.grad.at(i, j) * n.val.at(i, j);
            for (int j = 0; j < n.grad.cols; ++j)
                g.at(i, j) += n.val.at(i, j) * (n.grad.at(i, j) - dot);
        }
    });
}

Var Tape::layernorm(Var a, Var gain, Var bias) {
    check(a.cols >= 2, "layernorm: needs >= 2 features");
    check(gain.rows == 1 && gain.cols == a.cols, "layernorm: gain shape");
    check(bias.rows == 1 && bias.cols == a.cols, "layernorm: bias shape");
    constexpr double kEps = 1e-5;
    const Tensor& av = node(a).val;
    const Tensor& gv = node(gain).val;
    const Tensor& bv = node(bias).val;
    Tensor out(a.rows, a.cols);
    Tensor xhat(a.rows, a.cols);
    std::vector<double> inv_sigma(a.rows);
    for (int i = 0; i < a.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < a.cols; ++j) mu += av.at(i, j);
        mu /= a.cols;
        double var = 0.0;
        for (int j = 0; j < a.cols; ++j) {
            const double d = av.at(i, j) - mu;
            var += d * d;
        }
        var /= a.cols;
        inv_sigma[i] = 1.0 / std::sqrt(var + kEps);
        for (int j = 0; j < a.cols; ++j) {
            xhat.at(i, j) = (av.at(i, j) - mu) * inv_sigma[i];
            out.at(i, j) = xhat.at(i, j) * gv.at(0, j) + bv.at(0, j);
        }
    }
    return push(std::move(out), [a, gain, bias, xhat, inv_sigma](Tape& t, Node& n) {
        const Tensor& gv2 = t.node(gain).val;
        Tensor& ga = t.node(a).grad;
        Tensor& gg = t.node(gain).grad;
        Tensor& gb = t.node(bias).grad;
        const int c = n.grad.cols;
        for (int i = 0; i < n.grad.rows; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (int j = 0; j < c; ++j) {
                const double dxh = n.grad.at(i, j) * gv2.at(0, j);
                m1 += dxh;
                m2 += dxh * xhat.at(i, j);
                gg.at(0, j) += n.grad.at(i, j) * xhat.at(i, j);
                gb.at(0, j) += n.grad.at(i, j);
            }
            m1 /= c;
            m2 /= c;
            for (int j = 0; j < c; ++j) {
                const double dxh = n.grad.at(i, j) * gv2.at(0, j);
                ga.at(i, j) += inv_sigma[i] * (dxh - m1 - xhat.at(i, j) * m2);
            }
        }
    });
}

Var Tape::sum_all(Var a) {
    Tensor out(1, 1);
    for (double x : node(a).val.data) out.data[0] += x;
    return push(std::move(out), [a](Tape& t, Node& n) {
        for (double& g : t.node(a).grad.data) g += n.grad.data[0];
    });
}

Var Tape::mean_all(Var a) {
    Tensor out(1, 1);
    const double inv = 1.0 / static_cast<double>(node(a).val.size());
    for (double x : node(a).val.data) out.data[0] += x * inv;
    return push(std::move(out), [a, inv](Tape& t, Node& n) {
        for (double& g : t.node(a).grad.data) g += n.grad.data[0] * inv;
    });
}

void Tape::backward(Var loss) {
    if (loss.rows != 1 || loss.cols != 1)
        throw NonScalarLoss("backward: loss must be a scalar");
    for (int i = 0; i <= loss.id; ++i)
        nodes_[i].grad = Tensor(nodes_[i].val.rows, nodes_[i].val.cols);
    nodes_[loss.id].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i)
        if (nodes_[i].back) nodes_[i].back(*this, nodes_[i]);
    for (int i = 0; i <= loss.id; ++i) {
        if (nodes_[i].bound) {
            Tensor& pg = nodes_[i].bound->grad;
            if (pg.size() != nodes_[i].grad.size())
                pg = Tensor(nodes_[i].val.rows, nodes_[i].val.cols);
            for (size_t k = 0; k < pg.size(); ++k) pg.data[k] += nodes_[i].grad.data[k];
        }
    }
}

}  // namespace mvreg
