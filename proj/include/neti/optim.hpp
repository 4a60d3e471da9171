#pragma once

#include <cmath>
#include <vector>

#include "neti/common.hpp"
#include "neti/tensor.hpp"

namespace neti {

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, which must therefore stay stable across steps. Parameters
// whose grad buffer is empty are treated as having zero gradient: their
// moments decay and (after the first step) the update is zero.
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<Tensor<T>*> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->numel(), 0.0);
            v_[i].assign(params_[i]->numel(), 0.0);
        }
    }

    long steps_taken() const { return t_; }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& p = *params_[i];
            require(m_[i].size() == p.numel(), "Adam: parameter ", i, " changed size");
            const bool has_grad = !p.grad.empty();
            for (size_t j = 0; j < p.numel(); ++j) {
                const double g = has_grad ? static_cast<double>(p.grad[j]) : 0.0;
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                const T delta = static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
                // Skip exact-zero updates: "x -= -0.0" would rewrite a stored
                // -0.0 to +0.0, so a zero step must leave every bit alone.
                if (delta != T(0)) {
                    p.data[j] -= delta;
                }
            }
        }
    }

private:
    std::vector<Tensor<T>*> params_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace neti
