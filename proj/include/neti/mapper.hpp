#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "neti/common.hpp"
#include "neti/graph.hpp"
#include "neti/rng.hpp"
#include "neti/tensor.hpp"

namespace neti {

// How (t, layer) queries reach the mapper. The ablation modes replace one or
// both inputs with a fixed midpoint placeholder (t=500 / layer=L/2), so an
// ablated mapper shares the architecture but sees a constant on that axis.
enum class QueryMode {
    Full,       // condition on both timestep and layer
    FixedTime,  // per-layer conditioning only
    FixedSpace, // per-timestep conditioning only
    FixedBoth,  // a single learned embedding through the same network
};

inline const char* query_mode_name(QueryMode m) {
    switch (m) {
    case QueryMode::Full: return "full";
    case QueryMode::FixedTime: return "fixed_time";
    case QueryMode::FixedSpace: return "fixed_space";
    case QueryMode::FixedBoth: return "fixed_both";
    }
    return "?";
}

inline QueryMode query_mode_from_name(const std::string& s) {
    if (s == "full") return QueryMode::Full;
    if (s == "fixed_time") return QueryMode::FixedTime;
    if (s == "fixed_space") return QueryMode::FixedSpace;
    if (s == "fixed_both") return QueryMode::FixedBoth;
    fail("unknown query mode '", s, "'");
}

struct MapperConfig {
    int num_layers = 4;    // L: cross-attention layers served
    int time_anchors = 10; // anchor timesteps at 0, 100, ..., 900
    int freqs = 64;        // F: random frequencies; feature dim is 2F
    int hidden = 128;      // d_h
    int out_dim = 64;      // D: token embedding dim
    double sigma_t = 0.03;
    double sigma_l = 2.0;
    bool bypass = false;
    bool train_anchor_matrix = false;
    double dropout_prob = 0.5;
    QueryMode query_mode = QueryMode::Full;

    int anchors() const { return num_layers * time_anchors; }

    void validate() const {
        require(num_layers > 0 && time_anchors > 0 && freqs > 0 && hidden > 0 && out_dim > 0,
                "mapper config: dimensions must be positive");
        require(dropout_prob >= 0.0 && dropout_prob <= 1.0,
                "mapper config: dropout_prob must be in [0,1]");
    }
};

// Trainable parameters exclude pe_w (always frozen random frequencies) and,
// unless train_anchor_matrix is set, pe_e. The anchor matrix is still
// serialized and counted, matching how the parameter budget is reported.
template <typename T>
struct MapperParams {
    MapperConfig cfg;
    Tensor<T> pe_w; // F x 2 frequencies for (t, layer)
    Tensor<T> pe_e; // A x 2F anchor matrix
    Tensor<T> fc1_w, fc1_b;
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> fc2_w, fc2_b;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> head_base_w, head_base_b;
    Tensor<T> head_pass_w, head_pass_b; // empty unless cfg.bypass

    std::vector<Tensor<T>*> trainable() {
        std::vector<Tensor<T>*> out;
        if (cfg.train_anchor_matrix) {
            out.push_back(&pe_e);
        }
        out.insert(out.end(), {&fc1_w, &fc1_b, &ln1_g, &ln1_b, &fc2_w, &fc2_b, &ln2_g, &ln2_b,
                               &head_base_w, &head_base_b});
        if (cfg.bypass) {
            out.push_back(&head_pass_w);
            out.push_back(&head_pass_b);
        }
        return out;
    }

    void set_requires_grad() {
        for (Tensor<T>* t : trainable()) {
            t->requires_grad = true;
        }
    }
};

struct MapperQueryResult {
    Value v_base;
    Value v_raw;  // base-head output before rescaling (diagnostics only)
    Value v_pass; // invalid unless bypass enabled
    std::optional<int> truncation_used;
};

// Closed-form trainable-parameter count: anchor matrix + fc1 + fc2 + two
// LayerNorm affine pairs + base head (+ bypass head).
inline long param_count(const MapperConfig& cfg) {
    const long A = cfg.anchors();
    const long F = cfg.freqs;
    const long dh = cfg.hidden;
    const long D = cfg.out_dim;
    long n = A * 2 * F + (A * dh + dh) + (dh * dh + dh) + 2 * (2 * dh) + (dh * D + D);
    if (cfg.bypass) {
        n += dh * D + D;
    }
    return n;
}

inline long serialized_size_bytes(const MapperConfig& cfg) { return 4 * param_count(cfg); }

// [cos(Wx); sin(Wx)] for x = (t, layer), with raw t in [0, 1000) and raw
// integer layer. Always computed in double so the feature constants feeding
// float graphs are identical across build modes.
template <typename T>
std::vector<double> fourier_features(double t, int layer, const MapperParams<T>& p) {
    require(t >= 0.0 && t < 1000.0, "fourier_features: t ", t, " outside [0, 1000)");
    require(layer >= 0 && layer < p.cfg.num_layers, "fourier_features: layer ", layer,
            " outside [0, ", p.cfg.num_layers, ")");
    const int F = p.cfg.freqs;
    std::vector<double> out(static_cast<size_t>(2) * F);
    for (int i = 0; i < F; ++i) {
        const double a = static_cast<double>(p.pe_w.at(i, 0)) * t +
                         static_cast<double>(p.pe_w.at(i, 1)) * static_cast<double>(layer);
        out[i] = std::cos(a);
        out[F + i] = std::sin(a);
    }
    return out;
}

// e = E x f(t, layer); plain (non-graph) version for analysis and tests.
template <typename T>
std::vector<double> encode_position(double t, int layer, const MapperParams<T>& p) {
    const std::vector<double> f = fourier_features(t, layer, p);
    const int A = p.cfg.anchors();
    require(p.pe_e.rows == A && p.pe_e.cols == static_cast<int>(f.size()),
            "encode_position: anchor matrix is ", p.pe_e.rows, "x", p.pe_e.cols, ", expected ", A,
            "x", f.size());
    std::vector<double> e(A, 0.0);
    for (int i = 0; i < A; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < f.size(); ++j) {
            acc += static_cast<double>(p.pe_e.at(i, static_cast<int>(j))) * f[j];
        }
        e[i] = acc;
    }
    return e;
}

template <typename T>
MapperParams<T> init_mapper(const MapperConfig& cfg, uint64_t seed) {
    cfg.validate();
    MapperParams<T> p;
    p.cfg = cfg;
    Rng rng(seed);

    // frequencies: column 0 scaled for timesteps, column 1 for layer indices
    p.pe_w = Tensor<T>(cfg.freqs, 2);
    for (int i = 0; i < cfg.freqs; ++i) {
        p.pe_w.at(i, 0) = static_cast<T>(rng.normal() * cfg.sigma_t);
        p.pe_w.at(i, 1) = static_cast<T>(rng.normal() * cfg.sigma_l);
    }

    // anchor rows are the features of the anchor grid, time-major
    p.pe_e = Tensor<T>(cfg.anchors(), 2 * cfg.freqs);
    int row = 0;
    for (int ti = 0; ti < cfg.time_anchors; ++ti) {
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::vector<double> f = fourier_features(100.0 * ti, l, p);
            for (int j = 0; j < 2 * cfg.freqs; ++j) {
                p.pe_e.at(row, j) = static_cast<T>(f[j]);
            }
            ++row;
        }
    }

    auto he_uniform = [&](int rows, int cols, int fan_in) {
        const double limit = std::sqrt(6.0 / fan_in);
        return Tensor<T>::rand_uniform(rows, cols, rng, -limit, limit);
    };
    p.fc1_w = he_uniform(cfg.anchors(), cfg.hidden, cfg.anchors());
    p.fc1_b = Tensor<T>::zeros(1, cfg.hidden);
    p.ln1_g = Tensor<T>::full(1, cfg.hidden, T(1));
    p.ln1_b = Tensor<T>::zeros(1, cfg.hidden);
    p.fc2_w = he_uniform(cfg.hidden, cfg.hidden, cfg.hidden);
    p.fc2_b = Tensor<T>::zeros(1, cfg.hidden);
    p.ln2_g = Tensor<T>::full(1, cfg.hidden, T(1));
    p.ln2_b = Tensor<T>::zeros(1, cfg.hidden);
    p.head_base_w = Tensor<T>::randn(cfg.hidden, cfg.out_dim, rng, 0.02);
    p.head_base_b = Tensor<T>::zeros(1, cfg.out_dim);
    if (cfg.bypass) {
        p.head_pass_w = Tensor<T>::randn(cfg.hidden, cfg.out_dim, rng, 0.02);
        p.head_pass_b = Tensor<T>::zeros(1, cfg.out_dim);
    }
    return p;
}

// Nested-dropout draw: with probability p, a uniform keep-width in
// {1, ..., d_h}; otherwise no truncation. Width 0 never occurs.
inline std::optional<int> sample_truncation(Rng& rng, int d_h, double p) {
    require(p >= 0.0 && p <= 1.0, "sample_truncation: p must be in [0,1]");
    if (rng.uniform() >= p) {
        return std::nullopt;
    }
    return 1 + static_cast<int>(rng.below(static_cast<uint64_t>(d_h)));
}

// Scale v to carry target_norm while preserving direction.
template <typename T>
Value rescale_output(Tape<T>& tape, Value v, double target_norm) {
    require(target_norm > 0.0, "rescale_output: target norm must be positive");
    if (tape.val(v).norm() == 0.0) {
        fail("rescale_output: zero-norm mapper output");
    }
    Value unit = tape.scale(v, tape.l2_norm(v), /*divide=*/true);
    return tape.scale(unit, tape.constant_scalar(static_cast<T>(target_norm)), /*divide=*/false);
}

// Substitute fixed placeholder inputs for the axes an ablated mapper does
// not condition on. The placeholders sit at the midpoint of each range.
inline std::pair<double, int> effective_query(const MapperConfig& cfg, double t, int layer) {
    double te = t;
    int le = layer;
    if (cfg.query_mode == QueryMode::FixedTime || cfg.query_mode == QueryMode::FixedBoth) {
        te = 500.0;
    }
    if (cfg.query_mode == QueryMode::FixedSpace || cfg.query_mode == QueryMode::FixedBoth) {
        le = cfg.num_layers / 2;
    }
    return {te, le};
}

// Full mapper pipeline on the tape:
//   encode_position -> fc1 -> LN -> leaky_relu -> fc2 -> LN -> leaky_relu
//   -> suffix mask (nested-dropout truncation) -> heads -> rescale(v_base).
// v_pass (bypass head) is not rescaled here; mix_bypass handles its norm.
template <typename T>
MapperQueryResult mapper_forward(Tape<T>& tape, MapperParams<T>& p, double t, int layer,
                                 std::optional<int> truncation, const Tensor<T>& v_super) {
    if (truncation) {
        require(*truncation >= 1 && *truncation <= p.cfg.hidden, "mapper_forward: truncation ",
                *truncation, " outside [1, ", p.cfg.hidden, "]");
    }
    require(v_super.numel() == static_cast<size_t>(p.cfg.out_dim),
            "mapper_forward: v_super has ", v_super.numel(), " entries, expected ",
            p.cfg.out_dim);
    const double super_norm = v_super.norm();
    if (super_norm == 0.0) {
        fail("mapper_forward: v_super has zero norm (missing super-category embedding?)");
    }

    const auto [te, le] = effective_query(p.cfg, t, layer);
    const std::vector<double> f = fourier_features(te, le, p);
    Tensor<T> f_col(static_cast<int>(f.size()), 1);
    for (size_t i = 0; i < f.size(); ++i) {
        f_col.data[i] = static_cast<T>(f[i]);
    }

    Value e_col = tape.matmul(tape.leaf(p.pe_e), tape.constant(std::move(f_col)));
    Value h = tape.reshape(e_col, 1, p.cfg.anchors());
    h = tape.add(tape.matmul(h, tape.leaf(p.fc1_w)), tape.leaf(p.fc1_b));
    h = tape.layer_norm(h);
    h = tape.add(tape.mul(h, tape.leaf(p.ln1_g)), tape.leaf(p.ln1_b));
    h = tape.leaky_relu(h);
    h = tape.add(tape.matmul(h, tape.leaf(p.fc2_w)), tape.leaf(p.fc2_b));
    h = tape.layer_norm(h);
    h = tape.add(tape.mul(h, tape.leaf(p.ln2_g)), tape.leaf(p.ln2_b));
    h = tape.leaky_relu(h);
    if (truncation && *truncation < p.cfg.hidden) {
        h = tape.suffix_mask(h, *truncation);
    }

    MapperQueryResult out;
    out.truncation_used = truncation;
    Value v = tape.add(tape.matmul(h, tape.leaf(p.head_base_w)), tape.leaf(p.head_base_b));
    out.v_raw = v;
    out.v_base = rescale_output(tape, v, super_norm);
    if (p.cfg.bypass) {
        out.v_pass = tape.add(tape.matmul(h, tape.leaf(p.head_pass_w)), tape.leaf(p.head_pass_b));
    }
    return out;
}

} // namespace neti
