#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "neti/common.hpp"
#include "neti/rng.hpp"

namespace neti {

// Dense row-major matrix. Everything in the model is rank-2; vectors are
// 1 x n rows and scalars are 1 x 1. Gradients accumulate additively into
// `grad` across backward passes until zero_grad() is called.
template <typename T>
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad; // empty until first accumulation

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {
        require(r >= 0 && c >= 0, "Tensor: negative shape ", r, "x", c);
    }

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, T v) {
        Tensor t(r, c);
        for (auto& x : t.data) {
            x = v;
        }
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t(1, 1);
        t.data[0] = v;
        return t;
    }

    static Tensor from_rows(int r, int c, std::vector<T> d) {
        require(d.size() == static_cast<size_t>(r) * c, "Tensor::from_rows: size mismatch");
        Tensor t;
        t.rows = r;
        t.cols = c;
        t.data = std::move(d);
        return t;
    }

    static Tensor randn(int r, int c, Rng& rng, double stddev = 1.0) {
        Tensor t(r, c);
        for (auto& x : t.data) {
            x = static_cast<T>(rng.normal() * stddev);
        }
        return t;
    }

    static Tensor rand_uniform(int r, int c, Rng& rng, double lo, double hi) {
        Tensor t(r, c);
        for (auto& x : t.data) {
            x = static_cast<T>(rng.uniform(lo, hi));
        }
        return t;
    }

    size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    T* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
    }

    void zero_grad() {
        if (!grad.empty()) {
            grad.assign(grad.size(), T(0));
        }
    }

    bool grad_is_zero() const {
        for (const T& g : grad) {
            if (g != T(0)) {
                return false;
            }
        }
        return true;
    }

    bool all_finite() const {
        for (const T& x : data) {
            if (!std::isfinite(static_cast<double>(x))) {
                return false;
            }
        }
        return true;
    }

    // L2 norm of the values, accumulated in double regardless of T.
    double norm() const {
        double s = 0.0;
        for (const T& x : data) {
            s += static_cast<double>(x) * static_cast<double>(x);
        }
        return std::sqrt(s);
    }

    double grad_norm() const {
        double s = 0.0;
        for (const T& g : grad) {
            s += static_cast<double>(g) * static_cast<double>(g);
        }
        return std::sqrt(s);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(rows, cols);
        for (size_t i = 0; i < data.size(); ++i) {
            t.data[i] = static_cast<U>(data[i]);
        }
        return t;
    }
};

} // namespace neti
