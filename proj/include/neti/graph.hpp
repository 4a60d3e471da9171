#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "neti/common.hpp"
#include "neti/kernels.hpp"
#include "neti/tensor.hpp"

namespace neti {

// Handle to a node on a Tape. Only meaningful for the tape that created it.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Op {
    Leaf,
    Constant,
    Matmul,
    Conv3x3,
    Add,
    Mul,
    LeakyRelu,
    LayerNorm,
    SoftmaxRows,
    L2Norm,
    Scale,
    ConcatRows,
    SliceRows,
    SuffixMask,
    Transpose,
    Reshape,
    Mse,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Matmul: return "matmul";
    case Op::Conv3x3: return "conv3x3";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::LayerNorm: return "layer_norm";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::L2Norm: return "l2_norm";
    case Op::Scale: return "scale";
    case Op::ConcatRows: return "concat_rows";
    case Op::SliceRows: return "slice_rows";
    case Op::SuffixMask: return "suffix_mask";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Mse: return "mse";
    }
    return "?";
}

// Eager reverse-mode tape. Each op computes its output immediately, records
// a node, and raises if the output contains NaN or Inf, so bad numerics are
// caught at the op that produced them. backward() walks nodes in reverse
// creation order and accumulates into Tensor::grad of every reachable leaf
// whose requires_grad is set; accumulation is additive until the caller
// zeroes the grads. Leaf tensors are held by pointer and must outlive the
// tape, and must not be mutated between forward building and backward.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    void set_check_finite(bool on) { check_finite_ = on; }

    const Tensor<T>& val(Value v) const {
        check_value(v);
        const Node& n = nodes_[v.id];
        return n.external ? *n.external : n.out;
    }

    Value leaf(Tensor<T>& t) {
        Node n;
        n.op = Op::Leaf;
        n.external = &t;
        n.needs_grad = t.requires_grad;
        return push(std::move(n), /*check=*/false);
    }

    Value constant(Tensor<T> t) {
        Node n;
        n.op = Op::Constant;
        n.out = std::move(t);
        n.needs_grad = false;
        return push(std::move(n), /*check=*/false);
    }

    Value constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    // C = A * B
    Value matmul(Value a, Value b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        require(ta.cols == tb.rows, "matmul: inner dims ", ta.cols, " vs ", tb.rows);
        Node n = binary(Op::Matmul, a, b, ta.rows, tb.cols);
        kernels::matmul(ta.data.data(), tb.data.data(), n.out.data.data(), ta.rows, ta.cols,
                        tb.cols);
        return push(std::move(n));
    }

    // Y = conv3x3(X, W); X is (H*W) x Cin channel-last, W is (9*Cin) x Cout.
    Value conv3x3(Value x, Value w, int H, int Wd) {
        const Tensor<T>& tx = val(x);
        const Tensor<T>& tw = val(w);
        require(tx.rows == H * Wd, "conv3x3: x rows ", tx.rows, " != H*W ", H * Wd);
        require(tw.rows == 9 * tx.cols, "conv3x3: w rows ", tw.rows, " != 9*Cin ", 9 * tx.cols);
        Node n = binary(Op::Conv3x3, x, w, tx.rows, tw.cols);
        n.i0 = H;
        n.i1 = Wd;
        kernels::conv3x3(tx.data.data(), tw.data.data(), n.out.data.data(), H, Wd, tx.cols,
                         tw.cols);
        return push(std::move(n));
    }

    // Elementwise add; b may be same-shape, a 1 x cols row, or a 1 x 1 scalar.
    Value add(Value a, Value b) { return ewise(Op::Add, a, b); }

    // Elementwise multiply, same broadcasting as add.
    Value mul(Value a, Value b) { return ewise(Op::Mul, a, b); }

    Value leaky_relu(Value a, T slope = T(0.01)) {
        const Tensor<T>& ta = val(a);
        Node n = unary(Op::LeakyRelu, a, ta.rows, ta.cols);
        n.scalar = slope;
        kernels::leaky_relu(ta.data.data(), n.out.data.data(), ta.numel(), slope);
        return push(std::move(n));
    }

    // Row-wise normalization to zero mean / unit variance (no affine part;
    // compose gain and bias with mul/add).
    Value layer_norm(Value a, double eps = 1e-5) {
        const Tensor<T>& ta = val(a);
        require(ta.cols > 0, "layer_norm: empty rows");
        Node n = unary(Op::LayerNorm, a, ta.rows, ta.cols);
        n.aux.resize(static_cast<size_t>(ta.rows) * 2);
        kernels::layer_norm(ta.data.data(), n.out.data.data(), ta.rows, ta.cols, eps,
                            n.aux.data(), n.aux.data() + ta.rows);
        return push(std::move(n));
    }

    Value softmax_rows(Value a) {
        const Tensor<T>& ta = val(a);
        Node n = unary(Op::SoftmaxRows, a, ta.rows, ta.cols);
        kernels::softmax_rows(ta.data.data(), n.out.data.data(), ta.rows, ta.cols);
        return push(std::move(n));
    }

    // Scalar L2 norm of all entries; sums in double.
    Value l2_norm(Value a) {
        const Tensor<T>& ta = val(a);
        Node n = unary(Op::L2Norm, a, 1, 1);
        double s = 0.0;
        for (const T& x : ta.data) {
            s += static_cast<double>(x) * static_cast<double>(x);
        }
        n.out.data[0] = static_cast<T>(std::sqrt(s));
        return push(std::move(n));
    }

    // y = x * s (divide=false) or x / s (divide=true); s is a 1 x 1 node.
    Value scale(Value x, Value s, bool divide) {
        const Tensor<T>& tx = val(x);
        const Tensor<T>& ts = val(s);
        require(ts.numel() == 1, "scale: s must be 1x1");
        const T sv = ts.data[0];
        if (divide) {
            require(sv != T(0), "scale: divide by zero");
        }
        Node n = binary(Op::Scale, x, s, tx.rows, tx.cols);
        n.flag = divide;
        const T f = divide ? T(1) / sv : sv;
        for (size_t i = 0; i < tx.numel(); ++i) {
            n.out.data[i] = tx.data[i] * f;
        }
        return push(std::move(n));
    }

    Value concat_rows(const std::vector<Value>& parts) {
        require(!parts.empty(), "concat_rows: no inputs");
        int rows = 0;
        const int cols = val(parts[0]).cols;
        for (Value p : parts) {
            require(val(p).cols == cols, "concat_rows: column mismatch");
            rows += val(p).rows;
        }
        Node n;
        n.op = Op::ConcatRows;
        n.inputs.reserve(parts.size());
        for (Value p : parts) {
            n.inputs.push_back(p.id);
            n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
        }
        n.out = Tensor<T>(rows, cols);
        int r = 0;
        for (Value p : parts) {
            const Tensor<T>& tp = val(p);
            std::copy(tp.data.begin(), tp.data.end(), n.out.row_ptr(r));
            r += tp.rows;
        }
        return push(std::move(n));
    }

    Value slice_rows(Value a, int start, int count) {
        const Tensor<T>& ta = val(a);
        require(start >= 0 && count >= 1 && start + count <= ta.rows, "slice_rows: range [",
                start, ", ", start + count, ") out of ", ta.rows, " rows");
        Node n = unary(Op::SliceRows, a, count, ta.cols);
        n.i0 = start;
        n.i1 = count;
        std::copy(ta.row_ptr(start), ta.row_ptr(start) + static_cast<size_t>(count) * ta.cols,
                  n.out.data.data());
        return push(std::move(n));
    }

    // Zero every column with index >= k (nested-dropout truncation mask).
    Value suffix_mask(Value a, int k) {
        const Tensor<T>& ta = val(a);
        require(k >= 0 && k <= ta.cols, "suffix_mask: k ", k, " out of [0, ", ta.cols, "]");
        Node n = unary(Op::SuffixMask, a, ta.rows, ta.cols);
        n.i0 = k;
        for (int i = 0; i < ta.rows; ++i) {
            const T* src = ta.row_ptr(i);
            T* dst = n.out.row_ptr(i);
            for (int j = 0; j < k; ++j) {
                dst[j] = src[j];
            }
            for (int j = k; j < ta.cols; ++j) {
                dst[j] = T(0);
            }
        }
        return push(std::move(n));
    }

    Value transpose(Value a) {
        const Tensor<T>& ta = val(a);
        Node n = unary(Op::Transpose, a, ta.cols, ta.rows);
        for (int i = 0; i < ta.rows; ++i) {
            for (int j = 0; j < ta.cols; ++j) {
                n.out.at(j, i) = ta.at(i, j);
            }
        }
        return push(std::move(n), /*check=*/false);
    }

    Value reshape(Value a, int rows, int cols) {
        const Tensor<T>& ta = val(a);
        require(static_cast<size_t>(rows) * cols == ta.numel(), "reshape: ", rows, "x", cols,
                " incompatible with ", ta.rows, "x", ta.cols);
        Node n = unary(Op::Reshape, a, rows, cols);
        n.out.data = ta.data;
        return push(std::move(n), /*check=*/false);
    }

    // Mean squared error over all entries; sums in double.
    Value mse(Value a, Value b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        require(ta.same_shape(tb), "mse: shape mismatch ", ta.rows, "x", ta.cols, " vs ", tb.rows,
                "x", tb.cols);
        Node n = binary(Op::Mse, a, b, 1, 1);
        double s = 0.0;
        for (size_t i = 0; i < ta.numel(); ++i) {
            const double d = static_cast<double>(ta.data[i]) - static_cast<double>(tb.data[i]);
            s += d * d;
        }
        n.out.data[0] = static_cast<T>(s / static_cast<double>(ta.numel()));
        return push(std::move(n));
    }

    // Reverse pass from a scalar loss. Adjoints for this call are fresh;
    // leaf grads accumulate on top of whatever is already there.
    void backward(Value loss) {
        check_value(loss);
        require(val(loss).numel() == 1, "backward: loss must be scalar");
        adj_.assign(nodes_.size(), {});
        adj_buf(loss.id)[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (adj_[id].empty() || !n.needs_grad) {
                continue;
            }
            backward_node(id, n);
        }
        adj_.clear();
    }

private:
    struct Node {
        Op op = Op::Constant;
        std::array<int, 2> in{-1, -1};
        std::vector<int> inputs; // concat only
        int i0 = 0;              // op-specific: H / start / k
        int i1 = 0;              // op-specific: W / count
        T scalar = T(0);         // leaky slope
        bool flag = false;       // scale: divide
        bool needs_grad = false;
        Tensor<T>* external = nullptr; // leaf storage
        Tensor<T> out;                 // owned output for non-leaf nodes
        std::vector<T> aux;            // layer_norm: means then invstds
    };

    void check_value(Value v) const {
        require(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "invalid Value handle");
    }

    Node unary(Op op, Value a, int rows, int cols) {
        check_value(a);
        Node n;
        n.op = op;
        n.in[0] = a.id;
        n.needs_grad = nodes_[a.id].needs_grad;
        n.out = Tensor<T>(rows, cols);
        return n;
    }

    Node binary(Op op, Value a, Value b, int rows, int cols) {
        check_value(a);
        check_value(b);
        Node n;
        n.op = op;
        n.in[0] = a.id;
        n.in[1] = b.id;
        n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
        n.out = Tensor<T>(rows, cols);
        return n;
    }

    static bool bcast_ok(const Tensor<T>& a, const Tensor<T>& b) {
        return a.same_shape(b) || (b.rows == 1 && b.cols == a.cols) ||
               (b.rows == 1 && b.cols == 1);
    }

    Value ewise(Op op, Value a, Value b) {
        const Tensor<T>& ta = val(a);
        const Tensor<T>& tb = val(b);
        require(bcast_ok(ta, tb), op_name(op), ": shape ", tb.rows, "x", tb.cols,
                " does not broadcast onto ", ta.rows, "x", ta.cols);
        Node n = binary(op, a, b, ta.rows, ta.cols);
        const bool scalar_b = tb.numel() == 1;
        const bool row_b = !scalar_b && tb.rows == 1 && ta.rows > 1;
        for (int i = 0; i < ta.rows; ++i) {
            const T* pa = ta.row_ptr(i);
            const T* pb = scalar_b ? tb.data.data() : (row_b ? tb.data.data() : tb.row_ptr(i));
            T* po = n.out.row_ptr(i);
            if (op == Op::Add) {
                for (int j = 0; j < ta.cols; ++j) {
                    po[j] = pa[j] + (scalar_b ? pb[0] : pb[j]);
                }
            } else {
                for (int j = 0; j < ta.cols; ++j) {
                    po[j] = pa[j] * (scalar_b ? pb[0] : pb[j]);
                }
            }
        }
        return push(std::move(n));
    }

    Value push(Node&& n, bool check = true) {
        if (check && check_finite_) {
            const Tensor<T>& t = n.external ? *n.external : n.out;
            if (!t.all_finite()) {
                fail("non-finite values after op '", op_name(n.op), "' (node ", nodes_.size(),
                     ")");
            }
        }
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<T>& adj_buf(int id) {
        if (adj_[id].empty()) {
            const Node& n = nodes_[id];
            const Tensor<T>& t = n.external ? *n.external : n.out;
            adj_[id].assign(t.numel(), T(0));
        }
        return adj_[id];
    }

    bool input_wants_grad(int id) const { return id >= 0 && nodes_[id].needs_grad; }

    void backward_node(int id, Node& n) {
        const std::vector<T>& dy = adj_[id];
        switch (n.op) {
        case Op::Leaf: {
            if (n.external->requires_grad) {
                n.external->ensure_grad();
                for (size_t i = 0; i < dy.size(); ++i) {
                    n.external->grad[i] += dy[i];
                }
            }
            break;
        }
        case Op::Constant:
            break;
        case Op::Matmul: {
            const Tensor<T>& ta = val(Value{n.in[0]});
            const Tensor<T>& tb = val(Value{n.in[1]});
            if (input_wants_grad(n.in[0])) {
                kernels::matmul_grad_a(dy.data(), tb.data.data(), adj_buf(n.in[0]).data(), ta.rows,
                                       ta.cols, tb.cols);
            }
            if (input_wants_grad(n.in[1])) {
                kernels::matmul_grad_b(ta.data.data(), dy.data(), adj_buf(n.in[1]).data(), ta.rows,
                                       ta.cols, tb.cols);
            }
            break;
        }
        case Op::Conv3x3: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            const Tensor<T>& tw = val(Value{n.in[1]});
            if (input_wants_grad(n.in[0])) {
                kernels::conv3x3_grad_x(dy.data(), tw.data.data(), adj_buf(n.in[0]).data(), n.i0,
                                        n.i1, tx.cols, tw.cols);
            }
            if (input_wants_grad(n.in[1])) {
                kernels::conv3x3_grad_w(tx.data.data(), dy.data(), adj_buf(n.in[1]).data(), n.i0,
                                        n.i1, tx.cols, tw.cols);
            }
            break;
        }
        case Op::Add:
        case Op::Mul: {
            const Tensor<T>& ta = val(Value{n.in[0]});
            const Tensor<T>& tb = val(Value{n.in[1]});
            const bool scalar_b = tb.numel() == 1;
            const bool row_b = !scalar_b && tb.rows == 1 && ta.rows > 1;
            if (input_wants_grad(n.in[0])) {
                std::vector<T>& da = adj_buf(n.in[0]);
                if (n.op == Op::Add) {
                    for (size_t i = 0; i < dy.size(); ++i) {
                        da[i] += dy[i];
                    }
                } else {
                    for (int i = 0; i < ta.rows; ++i) {
                        const T* pb =
                            scalar_b ? tb.data.data() : (row_b ? tb.data.data() : tb.row_ptr(i));
                        const T* pdy = dy.data() + static_cast<size_t>(i) * ta.cols;
                        T* pda = da.data() + static_cast<size_t>(i) * ta.cols;
                        for (int j = 0; j < ta.cols; ++j) {
                            pda[j] += pdy[j] * (scalar_b ? pb[0] : pb[j]);
                        }
                    }
                }
            }
            if (input_wants_grad(n.in[1])) {
                std::vector<T>& db = adj_buf(n.in[1]);
                for (int i = 0; i < ta.rows; ++i) {
                    const T* pa = ta.row_ptr(i);
                    const T* pdy = dy.data() + static_cast<size_t>(i) * ta.cols;
                    for (int j = 0; j < ta.cols; ++j) {
                        const T g = n.op == Op::Add ? pdy[j] : pdy[j] * pa[j];
                        if (scalar_b) {
                            db[0] += g;
                        } else if (row_b) {
                            db[j] += g;
                        } else {
                            db[static_cast<size_t>(i) * ta.cols + j] += g;
                        }
                    }
                }
            }
            break;
        }
        case Op::LeakyRelu: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            kernels::leaky_relu_grad(tx.data.data(), dy.data(), adj_buf(n.in[0]).data(),
                                     tx.numel(), n.scalar);
            break;
        }
        case Op::LayerNorm: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            kernels::layer_norm_grad(tx.data.data(), dy.data(), adj_buf(n.in[0]).data(), tx.rows,
                                     tx.cols, n.aux.data(), n.aux.data() + tx.rows);
            break;
        }
        case Op::SoftmaxRows: {
            kernels::softmax_rows_grad(n.out.data.data(), dy.data(), adj_buf(n.in[0]).data(),
                                       n.out.rows, n.out.cols);
            break;
        }
        case Op::L2Norm: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            const T norm = n.out.data[0];
            if (norm == T(0)) {
                fail("l2_norm: gradient undefined at the zero vector");
            }
            const T g = dy[0] / norm;
            std::vector<T>& da = adj_buf(n.in[0]);
            for (size_t i = 0; i < tx.numel(); ++i) {
                da[i] += g * tx.data[i];
            }
            break;
        }
        case Op::Scale: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            const T sv = val(Value{n.in[1]}).data[0];
            const T f = n.flag ? T(1) / sv : sv;
            if (input_wants_grad(n.in[0])) {
                std::vector<T>& da = adj_buf(n.in[0]);
                for (size_t i = 0; i < dy.size(); ++i) {
                    da[i] += dy[i] * f;
                }
            }
            if (input_wants_grad(n.in[1])) {
                double acc = 0.0;
                for (size_t i = 0; i < dy.size(); ++i) {
                    acc += static_cast<double>(dy[i]) * static_cast<double>(tx.data[i]);
                }
                // d/ds (x*s) = x;  d/ds (x/s) = -x/s^2
                const double gs = n.flag
                                      ? -acc / (static_cast<double>(sv) * static_cast<double>(sv))
                                      : acc;
                adj_buf(n.in[1])[0] += static_cast<T>(gs);
            }
            break;
        }
        case Op::ConcatRows: {
            int r = 0;
            for (int src : n.inputs) {
                const Tensor<T>& tp = val(Value{src});
                if (input_wants_grad(src)) {
                    std::vector<T>& dp = adj_buf(src);
                    const T* base = dy.data() + static_cast<size_t>(r) * tp.cols;
                    for (size_t i = 0; i < tp.numel(); ++i) {
                        dp[i] += base[i];
                    }
                }
                r += tp.rows;
            }
            break;
        }
        case Op::SliceRows: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            std::vector<T>& da = adj_buf(n.in[0]);
            T* base = da.data() + static_cast<size_t>(n.i0) * tx.cols;
            for (size_t i = 0; i < dy.size(); ++i) {
                base[i] += dy[i];
            }
            break;
        }
        case Op::SuffixMask: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            std::vector<T>& da = adj_buf(n.in[0]);
            for (int i = 0; i < tx.rows; ++i) {
                const T* pdy = dy.data() + static_cast<size_t>(i) * tx.cols;
                T* pda = da.data() + static_cast<size_t>(i) * tx.cols;
                for (int j = 0; j < n.i0; ++j) {
                    pda[j] += pdy[j];
                }
            }
            break;
        }
        case Op::Transpose: {
            const Tensor<T>& tx = val(Value{n.in[0]});
            std::vector<T>& da = adj_buf(n.in[0]);
            for (int i = 0; i < tx.rows; ++i) {
                for (int j = 0; j < tx.cols; ++j) {
                    da[static_cast<size_t>(i) * tx.cols + j] +=
                        dy[static_cast<size_t>(j) * tx.rows + i];
                }
            }
            break;
        }
        case Op::Reshape: {
            std::vector<T>& da = adj_buf(n.in[0]);
            for (size_t i = 0; i < dy.size(); ++i) {
                da[i] += dy[i];
            }
            break;
        }
        case Op::Mse: {
            const Tensor<T>& ta = val(Value{n.in[0]});
            const Tensor<T>& tb = val(Value{n.in[1]});
            const T g = dy[0] * T(2) / static_cast<T>(ta.numel());
            if (input_wants_grad(n.in[0])) {
                std::vector<T>& da = adj_buf(n.in[0]);
                for (size_t i = 0; i < ta.numel(); ++i) {
                    da[i] += g * (ta.data[i] - tb.data[i]);
                }
            }
            if (input_wants_grad(n.in[1])) {
                std::vector<T>& db = adj_buf(n.in[1]);
                for (size_t i = 0; i < ta.numel(); ++i) {
                    db[i] -= g * (ta.data[i] - tb.data[i]);
                }
            }
            break;
        }
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> adj_;
    bool check_finite_ = true;
};

} // namespace neti
