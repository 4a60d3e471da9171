#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "neti/common.hpp"

// Compute kernels behind the autodiff ops. Each kernel has a plain serial
// reference implementation and an OpenMP variant that parallelises over the
// independent outer dimension (rows / output positions). Both variants call
// the same per-row routines, so inner-loop arithmetic order is identical and
// results match the serial reference bit for bit at any thread count —
// reductions are never split across threads. The free functions at the end
// dispatch between the two based on a global flag and problem size.

namespace neti::kernels {

bool& parallel_flag();
inline void set_parallel(bool on) { parallel_flag() = on; }
inline bool parallel_enabled() { return parallel_flag(); }

// Work (in output elements) below which the dispatcher always runs serial.
constexpr size_t kParallelCutoff = 4096;

namespace detail {

// C[i,:] = A[i,:] * B  (k-major accumulation; contiguous stores over j)
template <typename T>
inline void matmul_row(const T* a, const T* B, T* c, int k, int n) {
    for (int j = 0; j < n; ++j) {
        c[j] = T(0);
    }
    for (int kk = 0; kk < k; ++kk) {
        const T av = a[kk];
        const T* b = B + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) {
            c[j] += av * b[j];
        }
    }
}

// dA[i,:] += dC[i,:] * B^T, with B^T precomputed (n x k) so the inner loop
// is contiguous over kk.
template <typename T>
inline void matmul_grad_a_row(const T* dc, const T* Bt, T* da, int k, int n) {
    for (int j = 0; j < n; ++j) {
        const T g = dc[j];
        const T* bt = Bt + static_cast<size_t>(j) * k;
        for (int kk = 0; kk < k; ++kk) {
            da[kk] += g * bt[kk];
        }
    }
}

// dB[kk,:] += sum_i A[i,kk] * dC[i,:]
template <typename T>
inline void matmul_grad_b_row(const T* A, const T* dC, T* db, int m, int k, int n, int kk) {
    for (int i = 0; i < m; ++i) {
        const T av = A[static_cast<size_t>(i) * k + kk];
        const T* dc = dC + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            db[j] += av * dc[j];
        }
    }
}

// 3x3 same-padding convolution at one output pixel. X is (H*W) x Cin
// channel-last, W is (9*Cin) x Cout with taps ordered row-major over the
// 3x3 window.
template <typename T>
inline void conv3x3_point(const T* X, const T* W, T* y, int H, int Wd, int cin, int cout, int p) {
    const int pr = p / Wd;
    const int pc = p % Wd;
    for (int j = 0; j < cout; ++j) {
        y[j] = T(0);
    }
    for (int dr = 0; dr < 3; ++dr) {
        const int qr = pr + dr - 1;
        if (qr < 0 || qr >= H) {
            continue;
        }
        for (int dc = 0; dc < 3; ++dc) {
            const int qc = pc + dc - 1;
            if (qc < 0 || qc >= Wd) {
                continue;
            }
            const T* x = X + static_cast<size_t>(qr * Wd + qc) * cin;
            const T* w = W + static_cast<size_t>(dr * 3 + dc) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
                const T xv = x[ci];
                const T* wr = w + static_cast<size_t>(ci) * cout;
                for (int j = 0; j < cout; ++j) {
                    y[j] += xv * wr[j];
                }
            }
        }
    }
}

// dX at one input pixel, using taps transposed to (9*Cout) x Cin so the
// inner loop is contiguous over ci.
template <typename T>
inline void conv3x3_grad_x_point(const T* dY, const T* Wt, T* dx, int H, int Wd, int cin, int cout,
                                 int q) {
    const int qr = q / Wd;
    const int qc = q % Wd;
    for (int dr = 0; dr < 3; ++dr) {
        const int pr = qr - (dr - 1);
        if (pr < 0 || pr >= H) {
            continue;
        }
        for (int dc = 0; dc < 3; ++dc) {
            const int pc = qc - (dc - 1);
            if (pc < 0 || pc >= Wd) {
                continue;
            }
            const T* dy = dY + static_cast<size_t>(pr * Wd + pc) * cout;
            const T* wt = Wt + static_cast<size_t>(dr * 3 + dc) * cout * cin;
            for (int co = 0; co < cout; ++co) {
                const T g = dy[co];
                const T* wr = wt + static_cast<size_t>(co) * cin;
                for (int ci = 0; ci < cin; ++ci) {
                    dx[ci] += g * wr[ci];
                }
            }
        }
    }
}

// dW for one (tap, ci) row: dW[tap,ci,:] += sum_p X[q(p,tap),ci] * dY[p,:]
template <typename T>
inline void conv3x3_grad_w_row(const T* X, const T* dY, T* dwr, int H, int Wd, int cin, int cout,
                               int tap, int ci) {
    const int dr = tap / 3;
    const int dc = tap % 3;
    for (int pr = 0; pr < H; ++pr) {
        const int qr = pr + dr - 1;
        if (qr < 0 || qr >= H) {
            continue;
        }
        for (int pc = 0; pc < Wd; ++pc) {
            const int qc = pc + dc - 1;
            if (qc < 0 || qc >= Wd) {
                continue;
            }
            const T xv = X[static_cast<size_t>(qr * Wd + qc) * cin + ci];
            const T* dy = dY + static_cast<size_t>(pr * Wd + pc) * cout;
            for (int j = 0; j < cout; ++j) {
                dwr[j] += xv * dy[j];
            }
        }
    }
}

// Normalize one row to zero mean / unit variance. Statistics accumulate in
// double so float tensors stay well inside 1e-6 tolerances. A row of equal
// values uses that value as the exact mean, so the output is exactly zero
// (eps keeps the inverse stddev finite).
template <typename T>
inline void layer_norm_row(const T* x, T* y, int n, double eps, T* mean_out, T* invstd_out) {
    bool all_equal = true;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) {
        mu += static_cast<double>(x[j]);
        all_equal = all_equal && x[j] == x[0];
    }
    mu /= n;
    if (all_equal) {
        mu = static_cast<double>(x[0]);
    }
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        const double d = static_cast<double>(x[j]) - mu;
        var += d * d;
    }
    var /= n;
    const double invstd = 1.0 / std::sqrt(var + eps);
    const T m = static_cast<T>(mu);
    const T s = static_cast<T>(invstd);
    for (int j = 0; j < n; ++j) {
        y[j] = (x[j] - m) * s;
    }
    *mean_out = m;
    *invstd_out = s;
}

template <typename T>
inline void layer_norm_grad_row(const T* x, const T* dy, T* dx, int n, T mean, T invstd) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int j = 0; j < n; ++j) {
        const double xh = static_cast<double>((x[j] - mean) * invstd);
        sum_dy += static_cast<double>(dy[j]);
        sum_dy_xhat += static_cast<double>(dy[j]) * xh;
    }
    const T mean_dy = static_cast<T>(sum_dy / n);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / n);
    for (int j = 0; j < n; ++j) {
        const T xh = (x[j] - mean) * invstd;
        dx[j] += invstd * (dy[j] - mean_dy - xh * mean_dy_xhat);
    }
}

template <typename T>
inline void softmax_row(const T* x, T* y, int n) {
    T m = x[0];
    for (int j = 1; j < n; ++j) {
        if (x[j] > m) {
            m = x[j];
        }
    }
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
        const double e = std::exp(static_cast<double>(x[j] - m));
        y[j] = static_cast<T>(e);
        s += e;
    }
    const T inv = static_cast<T>(1.0 / s);
    for (int j = 0; j < n; ++j) {
        y[j] *= inv;
    }
}

template <typename T>
inline void softmax_grad_row(const T* y, const T* dy, T* dx, int n) {
    double dot = 0.0;
    for (int j = 0; j < n; ++j) {
        dot += static_cast<double>(dy[j]) * static_cast<double>(y[j]);
    }
    const T d = static_cast<T>(dot);
    for (int j = 0; j < n; ++j) {
        dx[j] += y[j] * (dy[j] - d);
    }
}

template <typename T>
inline void leaky_relu_row(const T* x, T* y, int n, T slope) {
    for (int j = 0; j < n; ++j) {
        y[j] = x[j] > T(0) ? x[j] : slope * x[j];
    }
}

template <typename T>
inline void leaky_relu_grad_row(const T* x, const T* dy, T* dx, int n, T slope) {
    for (int j = 0; j < n; ++j) {
        dx[j] += x[j] > T(0) ? dy[j] : slope * dy[j];
    }
}

template <typename T>
inline std::vector<T> transpose_copy(const T* B, int rows, int cols) {
    std::vector<T> out(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out[static_cast<size_t>(c) * rows + r] = B[static_cast<size_t>(r) * cols + c];
        }
    }
    return out;
}

} // namespace detail

namespace serial {

template <typename T>
void matmul(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        detail::matmul_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
    }
}

template <typename T>
void matmul_grad_a(const T* dC, const T* B, T* dA, int m, int k, int n) {
    const std::vector<T> Bt = detail::transpose_copy(B, k, n);
    for (int i = 0; i < m; ++i) {
        detail::matmul_grad_a_row(dC + static_cast<size_t>(i) * n, Bt.data(),
                                  dA + static_cast<size_t>(i) * k, k, n);
    }
}

template <typename T>
void matmul_grad_b(const T* A, const T* dC, T* dB, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        detail::matmul_grad_b_row(A, dC, dB + static_cast<size_t>(kk) * n, m, k, n, kk);
    }
}

template <typename T>
void conv3x3(const T* X, const T* W, T* Y, int H, int Wd, int cin, int cout) {
    const int hw = H * Wd;
    for (int p = 0; p < hw; ++p) {
        detail::conv3x3_point(X, W, Y + static_cast<size_t>(p) * cout, H, Wd, cin, cout, p);
    }
}

template <typename T>
void conv3x3_grad_x(const T* dY, const T* W, T* dX, int H, int Wd, int cin, int cout) {
    std::vector<T> Wt(static_cast<size_t>(9) * cin * cout);
    for (int tap = 0; tap < 9; ++tap) {
        const T* src = W + static_cast<size_t>(tap) * cin * cout;
        T* dst = Wt.data() + static_cast<size_t>(tap) * cout * cin;
        for (int ci = 0; ci < cin; ++ci) {
            for (int co = 0; co < cout; ++co) {
                dst[static_cast<size_t>(co) * cin + ci] = src[static_cast<size_t>(ci) * cout + co];
            }
        }
    }
    const int hw = H * Wd;
    for (int q = 0; q < hw; ++q) {
        detail::conv3x3_grad_x_point(dY, Wt.data(), dX + static_cast<size_t>(q) * cin, H, Wd, cin,
                                     cout, q);
    }
}

template <typename T>
void conv3x3_grad_w(const T* X, const T* dY, T* dW, int H, int Wd, int cin, int cout) {
    for (int r = 0; r < 9 * cin; ++r) {
        detail::conv3x3_grad_w_row(X, dY, dW + static_cast<size_t>(r) * cout, H, Wd, cin, cout,
                                   r / cin, r % cin);
    }
}

template <typename T>
void layer_norm(const T* X, T* Y, int m, int n, double eps, T* means, T* invstds) {
    for (int i = 0; i < m; ++i) {
        detail::layer_norm_row(X + static_cast<size_t>(i) * n, Y + static_cast<size_t>(i) * n, n,
                               eps, means + i, invstds + i);
    }
}

template <typename T>
void layer_norm_grad(const T* X, const T* dY, T* dX, int m, int n, const T* means,
                     const T* invstds) {
    for (int i = 0; i < m; ++i) {
        detail::layer_norm_grad_row(X + static_cast<size_t>(i) * n, dY + static_cast<size_t>(i) * n,
                                    dX + static_cast<size_t>(i) * n, n, means[i], invstds[i]);
    }
}

template <typename T>
void softmax_rows(const T* X, T* Y, int m, int n) {
    for (int i = 0; i < m; ++i) {
        detail::softmax_row(X + static_cast<size_t>(i) * n, Y + static_cast<size_t>(i) * n, n);
    }
}

template <typename T>
void softmax_rows_grad(const T* Y, const T* dY, T* dX, int m, int n) {
    for (int i = 0; i < m; ++i) {
        detail::softmax_grad_row(Y + static_cast<size_t>(i) * n, dY + static_cast<size_t>(i) * n,
                                 dX + static_cast<size_t>(i) * n, n);
    }
}

template <typename T>
void leaky_relu(const T* X, T* Y, size_t numel, T slope) {
    detail::leaky_relu_row(X, Y, static_cast<int>(numel), slope);
}

template <typename T>
void leaky_relu_grad(const T* X, const T* dY, T* dX, size_t numel, T slope) {
    detail::leaky_relu_grad_row(X, dY, dX, static_cast<int>(numel), slope);
}

} // namespace serial

namespace par {

template <typename T>
void matmul(const T* A, const T* B, T* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::matmul_row(A + static_cast<size_t>(i) * k, B, C + static_cast<size_t>(i) * n, k, n);
    }
}

template <typename T>
void matmul_grad_a(const T* dC, const T* B, T* dA, int m, int k, int n) {
    const std::vector<T> Bt = detail::transpose_copy(B, k, n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::matmul_grad_a_row(dC + static_cast<size_t>(i) * n, Bt.data(),
                                  dA + static_cast<size_t>(i) * k, k, n);
    }
}

template <typename T>
void matmul_grad_b(const T* A, const T* dC, T* dB, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int kk = 0; kk < k; ++kk) {
        detail::matmul_grad_b_row(A, dC, dB + static_cast<size_t>(kk) * n, m, k, n, kk);
    }
}

template <typename T>
void conv3x3(const T* X, const T* W, T* Y, int H, int Wd, int cin, int cout) {
    const int hw = H * Wd;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < hw; ++p) {
        detail::conv3x3_point(X, W, Y + static_cast<size_t>(p) * cout, H, Wd, cin, cout, p);
    }
}

template <typename T>
void conv3x3_grad_x(const T* dY, const T* W, T* dX, int H, int Wd, int cin, int cout) {
    std::vector<T> Wt(static_cast<size_t>(9) * cin * cout);
    for (int tap = 0; tap < 9; ++tap) {
        const T* src = W + static_cast<size_t>(tap) * cin * cout;
        T* dst = Wt.data() + static_cast<size_t>(tap) * cout * cin;
        for (int ci = 0; ci < cin; ++ci) {
            for (int co = 0; co < cout; ++co) {
                dst[static_cast<size_t>(co) * cin + ci] = src[static_cast<size_t>(ci) * cout + co];
            }
        }
    }
    const int hw = H * Wd;
#pragma omp parallel for schedule(static)
    for (int q = 0; q < hw; ++q) {
        detail::conv3x3_grad_x_point(dY, Wt.data(), dX + static_cast<size_t>(q) * cin, H, Wd, cin,
                                     cout, q);
    }
}

template <typename T>
void conv3x3_grad_w(const T* X, const T* dY, T* dW, int H, int Wd, int cin, int cout) {
    const int rows = 9 * cin;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        detail::conv3x3_grad_w_row(X, dY, dW + static_cast<size_t>(r) * cout, H, Wd, cin, cout,
                                   r / cin, r % cin);
    }
}

template <typename T>
void layer_norm(const T* X, T* Y, int m, int n, double eps, T* means, T* invstds) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::layer_norm_row(X + static_cast<size_t>(i) * n, Y + static_cast<size_t>(i) * n, n,
                               eps, means + i, invstds + i);
    }
}

template <typename T>
void layer_norm_grad(const T* X, const T* dY, T* dX, int m, int n, const T* means,
                     const T* invstds) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::layer_norm_grad_row(X + static_cast<size_t>(i) * n, dY + static_cast<size_t>(i) * n,
                                    dX + static_cast<size_t>(i) * n, n, means[i], invstds[i]);
    }
}

template <typename T>
void softmax_rows(const T* X, T* Y, int m, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::softmax_row(X + static_cast<size_t>(i) * n, Y + static_cast<size_t>(i) * n, n);
    }
}

template <typename T>
void softmax_rows_grad(const T* Y, const T* dY, T* dX, int m, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        detail::softmax_grad_row(Y + static_cast<size_t>(i) * n, dY + static_cast<size_t>(i) * n,
                                 dX + static_cast<size_t>(i) * n, n);
    }
}

template <typename T>
void leaky_relu(const T* X, T* Y, size_t numel, T slope) {
    const long long n = static_cast<long long>(numel);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < n; ++i) {
        Y[i] = X[i] > T(0) ? X[i] : slope * X[i];
    }
}

template <typename T>
void leaky_relu_grad(const T* X, const T* dY, T* dX, size_t numel, T slope) {
    const long long n = static_cast<long long>(numel);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < n; ++i) {
        dX[i] += X[i] > T(0) ? dY[i] : slope * dY[i];
    }
}

} // namespace par

// Dispatchers: parallel when enabled and the output is large enough to
// amortise the fork/join.

template <typename T>
void matmul(const T* A, const T* B, T* C, int m, int k, int n) {
    if (parallel_enabled() && static_cast<size_t>(m) * n >= kParallelCutoff && m > 1) {
        par::matmul(A, B, C, m, k, n);
    } else {
        serial::matmul(A, B, C, m, k, n);
    }
}

template <typename T>
void matmul_grad_a(const T* dC, const T* B, T* dA, int m, int k, int n) {
    if (parallel_enabled() && static_cast<size_t>(m) * k >= kParallelCutoff && m > 1) {
        par::matmul_grad_a(dC, B, dA, m, k, n);
    } else {
        serial::matmul_grad_a(dC, B, dA, m, k, n);
    }
}

template <typename T>
void matmul_grad_b(const T* A, const T* dC, T* dB, int m, int k, int n) {
    if (parallel_enabled() && static_cast<size_t>(k) * n >= kParallelCutoff && k > 1) {
        par::matmul_grad_b(A, dC, dB, m, k, n);
    } else {
        serial::matmul_grad_b(A, dC, dB, m, k, n);
    }
}

template <typename T>
void conv3x3(const T* X, const T* W, T* Y, int H, int Wd, int cin, int cout) {
    if (parallel_enabled() && static_cast<size_t>(H) * Wd * cout >= kParallelCutoff) {
        par::conv3x3(X, W, Y, H, Wd, cin, cout);
    } else {
        serial::conv3x3(X, W, Y, H, Wd, cin, cout);
    }
}

template <typename T>
void conv3x3_grad_x(const T* dY, const T* W, T* dX, int H, int Wd, int cin, int cout) {
    if (parallel_enabled() && static_cast<size_t>(H) * Wd * cin >= kParallelCutoff) {
        par::conv3x3_grad_x(dY, W, dX, H, Wd, cin, cout);
    } else {
        serial::conv3x3_grad_x(dY, W, dX, H, Wd, cin, cout);
    }
}

template <typename T>
void conv3x3_grad_w(const T* X, const T* dY, T* dW, int H, int Wd, int cin, int cout) {
    if (parallel_enabled() && static_cast<size_t>(9) * cin * cout >= kParallelCutoff) {
        par::conv3x3_grad_w(X, dY, dW, H, Wd, cin, cout);
    } else {
        serial::conv3x3_grad_w(X, dY, dW, H, Wd, cin, cout);
    }
}

template <typename T>
void layer_norm(const T* X, T* Y, int m, int n, double eps, T* means, T* invstds) {
    if (parallel_enabled() && static_cast<size_t>(m) * n >= kParallelCutoff && m > 1) {
        par::layer_norm(X, Y, m, n, eps, means, invstds);
    } else {
        serial::layer_norm(X, Y, m, n, eps, means, invstds);
    }
}

template <typename T>
void layer_norm_grad(const T* X, const T* dY, T* dX, int m, int n, const T* means,
                     const T* invstds) {
    if (parallel_enabled() && static_cast<size_t>(m) * n >= kParallelCutoff && m > 1) {
        par::layer_norm_grad(X, dY, dX, m, n, means, invstds);
    } else {
        serial::layer_norm_grad(X, dY, dX, m, n, means, invstds);
    }
}

template <typename T>
void softmax_rows(const T* X, T* Y, int m, int n) {
    if (parallel_enabled() && static_cast<size_t>(m) * n >= kParallelCutoff && m > 1) {
        par::softmax_rows(X, Y, m, n);
    } else {
        serial::softmax_rows(X, Y, m, n);
    }
}

template <typename T>
void softmax_rows_grad(const T* Y, const T* dY, T* dX, int m, int n) {
    if (parallel_enabled() && static_cast<size_t>(m) * n >= kParallelCutoff && m > 1) {
        par::softmax_rows_grad(Y, dY, dX, m, n);
    } else {
        serial::softmax_rows_grad(Y, dY, dX, m, n);
    }
}

template <typename T>
void leaky_relu(const T* X, T* Y, size_t numel, T slope) {
    if (parallel_enabled() && numel >= kParallelCutoff) {
        par::leaky_relu(X, Y, numel, slope);
    } else {
        serial::leaky_relu(X, Y, numel, slope);
    }
}

template <typename T>
void leaky_relu_grad(const T* X, const T* dY, T* dX, size_t numel, T slope) {
    if (parallel_enabled() && numel >= kParallelCutoff) {
        par::leaky_relu_grad(X, dY, dX, numel, slope);
    } else {
        serial::leaky_relu_grad(X, dY, dX, numel, slope);
    }
}

} // namespace neti::kernels
