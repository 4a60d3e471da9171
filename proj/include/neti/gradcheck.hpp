#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "neti/graph.hpp"
#include "neti/tensor.hpp"

namespace neti {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;

    bool ok(double tol) const { return max_rel_err < tol; }
};

// Central-difference gradient check. `build` must construct the loss graph
// on the given tape from the current contents of the parameter tensors; it
// is re-invoked for every probe, so it must be deterministic. Relative error
// uses a small absolute floor so near-zero gradients are compared against
// finite-difference noise sensibly. Run with T = double; float loses too
// much precision for tight tolerances.
template <typename T, typename BuildFn>
GradCheckReport check_gradients(BuildFn&& build,
                                const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                                double fd_step = 1e-5, double rel_floor = 1e-4) {
    auto eval_loss = [&]() -> double {
        Tape<T> tape;
        Value loss = build(tape);
        return static_cast<double>(tape.val(loss).data[0]);
    };

    for (auto& [name, p] : params) {
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Tape<T> tape;
        Value loss = build(tape);
        tape.backward(loss);
    }

    GradCheckReport report;
    for (auto& [name, p] : params) {
        p->ensure_grad();
        GradCheckEntry entry;
        entry.name = name;
        for (size_t i = 0; i < p->data.size(); ++i) {
            const T orig = p->data[i];
            p->data[i] = orig + static_cast<T>(fd_step);
            const double lp = eval_loss();
            p->data[i] = orig - static_cast<T>(fd_step);
            const double lm = eval_loss();
            p->data[i] = orig;
            const double numeric = (lp - lm) / (2.0 * fd_step);
            const double analytic = static_cast<double>(p->grad[i]);
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), rel_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

} // namespace neti
