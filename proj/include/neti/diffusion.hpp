#pragma once

// Latent diffusion toy generator: noise schedule, conditional denoiser with
// per-layer cross-attention, deterministic (zero-noise) sampler, and the
// image <-> latent codec.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "neti/common.hpp"
#include "neti/graph.hpp"
#include "neti/image.hpp"
#include "neti/rng.hpp"
#include "neti/tensor.hpp"

namespace neti {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

// Linear beta schedule with cumulative alpha products kept in double
// precision.  alpha_bars[t] is strictly decreasing in (0, 1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02) {
    require(T >= 2, "noise schedule needs at least 2 steps, got ", T);
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
            "invalid beta range [", beta_start, ", ", beta_end, "]");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double bar = 1.0;
    for (int t = 0; t < T; ++t) {
      double beta =
          beta_start + (beta_end - beta_start) *
                           (static_cast<double>(t) / static_cast<double>(T - 1));
      double alpha = 1.0 - beta;
      bar *= alpha;
      s.betas[static_cast<size_t>(t)] = beta;
      s.alphas[static_cast<size_t>(t)] = alpha;
      s.alpha_bars[static_cast<size_t>(t)] = bar;
    }
    s.validate();
    return s;
  }

  void validate() const {
    require(T >= 2, "schedule too short");
    require(betas.size() == static_cast<size_t>(T) &&
                alphas.size() == static_cast<size_t>(T) &&
                alpha_bars.size() == static_cast<size_t>(T),
            "schedule arrays must have length T");
    for (int t = 0; t < T; ++t) {
      double b = betas[static_cast<size_t>(t)];
      double ab = alpha_bars[static_cast<size_t>(t)];
      require(b > 0.0 && b < 1.0, "beta out of (0,1) at t=", t);
      require(ab > 0.0 && ab < 1.0, "alpha_bar out of (0,1) at t=", t);
      if (t > 0) {
        require(betas[static_cast<size_t>(t)] >
                    betas[static_cast<size_t>(t - 1)],
                "betas must be strictly increasing at t=", t);
        require(ab < alpha_bars[static_cast<size_t>(t - 1)],
                "alpha_bars must be strictly decreasing at t=", t);
      }
    }
  }

  double alpha_bar(int t) const {
    require(t >= 0 && t < T, "timestep ", t, " outside [0, ", T, ")");
    return alpha_bars[static_cast<size_t>(t)];
  }
};

// Forward noising: z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
template <typename T>
Tensor<T> add_noise(const NoiseSchedule& sched, const Tensor<T>& z0,
                    const Tensor<T>& eps, int t) {
  require(z0.rows == eps.rows && z0.cols == eps.cols,
          "add_noise: z0 and eps must share a shape");
  double ab = sched.alpha_bar(t);
  T a = static_cast<T>(std::sqrt(ab));
  T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.rows, z0.cols);
  for (size_t i = 0; i < z0.data.size(); ++i) {
    out.data[i] = a * z0.data[i] + b * eps.data[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int latent_hw = 16;   // latent grid side; tensor rows = latent_hw^2
  int channels_in = 3;  // latent channels
  int channels = 32;    // hidden channels C
  int attn_dim = 32;    // single-head attention width d_a
  int blocks = 4;       // number of cross-attention layers L
  int temb_dim = 32;    // sinusoidal timestep embedding width
  int cond_dim = 64;    // conditioning token dimension D
  int context = 12;     // conditioning sequence length N

  void validate() const {
    require(latent_hw >= 2, "latent side must be >= 2");
    require(channels_in >= 1, "need at least one latent channel");
    require(channels >= 1 && attn_dim >= 1, "channel dims must be positive");
    require(blocks >= 1, "need at least one block");
    require(temb_dim >= 2 && temb_dim % 2 == 0,
            "timestep embedding width must be even and >= 2");
    require(cond_dim >= 1 && context >= 1, "conditioning dims must be positive");
  }

  int pixels() const { return latent_hw * latent_hw; }
};

template <typename T>
struct DenoiserBlockParams {
  Tensor<T> ln1_g, ln1_b;      // 1 x C
  Tensor<T> conv_w, conv_b;    // (9*C) x C, 1 x C
  Tensor<T> temb_w, temb_b;    // temb_dim x C, 1 x C
  Tensor<T> ln2_g, ln2_b;      // 1 x C
  Tensor<T> wq;                // C x d_a
  Tensor<T> wk, wv;            // D x d_a
  Tensor<T> wo;                // d_a x C
};

template <typename T>
struct DenoiserParams {
  DenoiserConfig cfg;
  Tensor<T> conv_in_w, conv_in_b;    // (9*Cin) x C, 1 x C
  std::vector<DenoiserBlockParams<T>> blocks;
  Tensor<T> lnf_g, lnf_b;            // 1 x C
  Tensor<T> conv_out_w, conv_out_b;  // (9*C) x Cin, 1 x Cin

  std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("denoiser.conv_in.w", &conv_in_w);
    out.emplace_back("denoiser.conv_in.b", &conv_in_b);
    for (size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      std::string p = msg_cat("denoiser.blk", i, ".");
      out.emplace_back(p + "ln1.g", &b.ln1_g);
      out.emplace_back(p + "ln1.b", &b.ln1_b);
      out.emplace_back(p + "conv.w", &b.conv_w);
      out.emplace_back(p + "conv.b", &b.conv_b);
      out.emplace_back(p + "temb.w", &b.temb_w);
      out.emplace_back(p + "temb.b", &b.temb_b);
      out.emplace_back(p + "ln2.g", &b.ln2_g);
      out.emplace_back(p + "ln2.b", &b.ln2_b);
      out.emplace_back(p + "wq", &b.wq);
      out.emplace_back(p + "wk", &b.wk);
      out.emplace_back(p + "wv", &b.wv);
      out.emplace_back(p + "wo", &b.wo);
    }
    out.emplace_back("denoiser.lnf.g", &lnf_g);
    out.emplace_back("denoiser.lnf.b", &lnf_b);
    out.emplace_back("denoiser.conv_out.w", &conv_out_w);
    out.emplace_back("denoiser.conv_out.b", &conv_out_b);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : trainable()) {
      (void)name;
      t->requires_grad = on;
      if (!on) t->grad.clear();
    }
  }
};

namespace detail_diffusion {

template <typename T>
Tensor<T> he_uniform(Rng& rng, int rows, int cols, int fan_in, double gain = 1.0) {
  double limit = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor<T> t(rows, cols);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

}  // namespace detail_diffusion

template <typename T>
DenoiserParams<T> init_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
  cfg.validate();
  using detail_diffusion::he_uniform;
  Rng rng(seed);
  DenoiserParams<T> p;
  p.cfg = cfg;
  const int C = cfg.channels;
  const int D = cfg.cond_dim;
  const int da = cfg.attn_dim;
  p.conv_in_w = he_uniform<T>(rng, 9 * cfg.channels_in, C, 9 * cfg.channels_in);
  p.conv_in_b = Tensor<T>::zeros(1, C);
  p.blocks.resize(static_cast<size_t>(cfg.blocks));
  for (auto& b : p.blocks) {
    b.ln1_g = Tensor<T>::full(1, C, static_cast<T>(1));
    b.ln1_b = Tensor<T>::zeros(1, C);
    b.conv_w = he_uniform<T>(rng, 9 * C, C, 9 * C);
    b.conv_b = Tensor<T>::zeros(1, C);
    b.temb_w = he_uniform<T>(rng, cfg.temb_dim, C, cfg.temb_dim);
    b.temb_b = Tensor<T>::zeros(1, C);
    b.ln2_g = Tensor<T>::full(1, C, static_cast<T>(1));
    b.ln2_b = Tensor<T>::zeros(1, C);
    b.wq = he_uniform<T>(rng, C, da, C);
    b.wk = he_uniform<T>(rng, D, da, D);
    b.wv = he_uniform<T>(rng, D, da, D);
    b.wo = he_uniform<T>(rng, da, C, da);
  }
  p.lnf_g = Tensor<T>::full(1, C, static_cast<T>(1));
  p.lnf_b = Tensor<T>::zeros(1, C);
  // Small output head keeps the initial prediction near zero without being
  // exactly zero (which would hide sensitivity bugs behind a constant).
  p.conv_out_w = he_uniform<T>(rng, 9 * C, cfg.channels_in, 9 * C, 0.05);
  p.conv_out_b = Tensor<T>::zeros(1, cfg.channels_in);
  return p;
}

// Sinusoidal embedding of a raw timestep (half sine / half cosine with
// log-spaced frequencies), returned as a 1 x dim tensor.
template <typename T>
Tensor<T> sinusoidal_time_embedding(double t, int dim) {
  require(dim >= 2 && dim % 2 == 0, "embedding width must be even and >= 2");
  const int half = dim / 2;
  Tensor<T> out(1, dim);
  for (int j = 0; j < half; ++j) {
    double denom = (half > 1) ? static_cast<double>(half - 1) : 1.0;
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / denom);
    out.data[static_cast<size_t>(j)] = static_cast<T>(std::sin(t * freq));
    out.data[static_cast<size_t>(half + j)] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

// Per-layer cross-attention sources: the key sequence and the value sequence
// (each context x cond_dim).  Keys always come from the base conditioning;
// values may carry the bypass contribution.
struct LayerConditioning {
  Value key;
  Value value;
};

// Predicts the noise residual for latent z_t (pixels x channels_in) at
// timestep t given one (key, value) conditioning pair per block.
// When attn_out is non-null the per-block attention matrices (pixels x
// context, rows softmax-normalized) are appended to it.
template <typename T>
Value predict_noise(Tape<T>& tape, const DenoiserConfig& cfg,
                    DenoiserParams<T>& p, Value z_t, int t,
                    const std::vector<LayerConditioning>& cond,
                    std::vector<Value>* attn_out = nullptr) {
  cfg.validate();
  require(static_cast<int>(cond.size()) == cfg.blocks,
          "conditioning must supply exactly ", cfg.blocks,
          " (key, value) pairs, got ", cond.size());
  require(tape.val(z_t).rows == cfg.pixels() && tape.val(z_t).cols == cfg.channels_in,
          "z_t must be ", cfg.pixels(), " x ", cfg.channels_in, ", got ",
          tape.val(z_t).rows, " x ", tape.val(z_t).cols);
  const int H = cfg.latent_hw;
  const double inv_sqrt_da = 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim));

  Tensor<T> temb_host = sinusoidal_time_embedding<T>(static_cast<double>(t),
                                                     cfg.temb_dim);
  Value temb = tape.constant(temb_host);

  Value h = tape.leaky_relu(
      tape.add(tape.conv3x3(z_t, tape.leaf(p.conv_in_w), H, H),
               tape.leaf(p.conv_in_b)));

  for (int bi = 0; bi < cfg.blocks; ++bi) {
    auto& b = p.blocks[static_cast<size_t>(bi)];
    // Convolutional sub-block with timestep modulation.
    Value u = tape.add(tape.mul(tape.layer_norm(h), tape.leaf(b.ln1_g)),
                       tape.leaf(b.ln1_b));
    Value tproj = tape.leaky_relu(
        tape.add(tape.matmul(temb, tape.leaf(b.temb_w)), tape.leaf(b.temb_b)));
    Value a = tape.leaky_relu(
        tape.add(tape.add(tape.conv3x3(u, tape.leaf(b.conv_w), H, H),
                          tape.leaf(b.conv_b)),
                 tproj));
    h = tape.add(h, a);

    // Cross-attention sub-block (single head).
    Value u2 = tape.add(tape.mul(tape.layer_norm(h), tape.leaf(b.ln2_g)),
                        tape.leaf(b.ln2_b));
    Value q = tape.matmul(u2, tape.leaf(b.wq));
    Value k = tape.matmul(cond[static_cast<size_t>(bi)].key, tape.leaf(b.wk));
    Value v = tape.matmul(cond[static_cast<size_t>(bi)].value, tape.leaf(b.wv));
    Value scores = tape.scale(
        tape.matmul(q, tape.transpose(k)),
        tape.constant_scalar(static_cast<T>(inv_sqrt_da)), /*divide=*/false);
    Value attn = tape.softmax_rows(scores);
    if (attn_out != nullptr) attn_out->push_back(attn);
    Value ctx = tape.matmul(tape.matmul(attn, v), tape.leaf(b.wo));
    h = tape.add(h, ctx);
  }

  Value uf = tape.add(tape.mul(tape.layer_norm(h), tape.leaf(p.lnf_g)),
                      tape.leaf(p.lnf_b));
  return tape.add(tape.conv3x3(uf, tape.leaf(p.conv_out_w), H, H),
                  tape.leaf(p.conv_out_b));
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

// Builds the per-block conditioning for a given timestep on the given tape.
template <typename T>
using CondBuilder =
    std::function<std::vector<LayerConditioning>(Tape<T>&, int)>;

// Cached timestep-independent conditioning (e.g. the unconditional prompt),
// stored as plain tensors and re-inserted as constants every step.
template <typename T>
struct CachedConditioning {
  std::vector<std::pair<Tensor<T>, Tensor<T>>> kv;  // per block: key, value
};

// Evenly spaced, strictly decreasing timesteps covering (0, T).
inline std::vector<int> make_sample_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, "steps must lie in [1, ", T, "], got ",
          steps);
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    int t = ((steps - i) * T) / steps - 1;
    ts.push_back(t);
  }
  for (size_t i = 0; i < ts.size(); ++i) {
    require(ts[i] >= 0 && ts[i] < T, "sample timestep out of range");
    if (i > 0) {
      require(ts[i] < ts[i - 1], "sample timesteps must strictly decrease");
    }
  }
  return ts;
}

template <typename T>
struct SampleResult {
  Tensor<T> latent;             // final denoised latent, pixels x channels_in
  std::vector<int> timesteps;   // visited timesteps, strictly decreasing
  int cond_builder_calls = 0;   // instrumentation: exactly one call per step
};

// Deterministic (zero-noise) ancestral sampler.  Each step re-predicts the
// clean latent from the current noise estimate and moves to the previous
// noise level without injecting fresh noise.
//
//   eps_hat = eps_uncond + guidance * (eps_cond - eps_uncond)
//
// guidance == 1 uses the conditional prediction alone (the unconditional
// branch is skipped entirely); guidance == 0 uses the unconditional
// prediction alone.  Any guidance != 1 requires cached unconditional
// conditioning from a generator that was trained with caption dropout.
template <typename T>
SampleResult<T> sample_latent(const DenoiserConfig& cfg, DenoiserParams<T>& p,
                              const NoiseSchedule& sched,
                              const CondBuilder<T>& cond_builder,
                              const CachedConditioning<T>* uncond,
                              bool uncond_trained, int steps, double guidance,
                              const Tensor<T>& init_noise) {
  cfg.validate();
  require(cond_builder != nullptr, "sample_latent needs a conditioning builder");
  require(init_noise.rows == cfg.pixels() &&
              init_noise.cols == cfg.channels_in,
          "init noise must be ", cfg.pixels(), " x ", cfg.channels_in);
  if (guidance != 1.0) {
    require(uncond_trained,
            "guidance != 1 requires a generator trained with caption dropout "
            "(no unconditional branch is available)");
    require(uncond != nullptr &&
                static_cast<int>(uncond->kv.size()) == cfg.blocks,
            "guidance != 1 requires cached unconditional conditioning for "
            "every block");
  }

  SampleResult<T> out;
  out.timesteps = make_sample_timesteps(sched.T, steps);
  out.latent = init_noise;

  for (size_t si = 0; si < out.timesteps.size(); ++si) {
    const int t = out.timesteps[si];
    Tape<T> tape;
    Value z = tape.constant(out.latent);

    // The conditional builder runs exactly once per step, guidance aside.
    std::vector<LayerConditioning> cond = cond_builder(tape, t);
    ++out.cond_builder_calls;

    std::vector<T> eps_hat(out.latent.data.size(), static_cast<T>(0));
    if (guidance == 1.0) {
      Value ec = predict_noise(tape, cfg, p, z, t, cond);
      eps_hat = tape.val(ec).data;
    } else {
      std::vector<LayerConditioning> ucond;
      ucond.reserve(uncond->kv.size());
      for (const auto& [ku, vu] : uncond->kv) {
        ucond.push_back(LayerConditioning{tape.constant(ku),
                                          tape.constant(vu)});
      }
      Value eu = predict_noise(tape, cfg, p, z, t, ucond);
      // Copy: building the conditional graph below grows the tape and may
      // reallocate the storage this value lives in.
      const std::vector<T> eu_v = tape.val(eu).data;
      if (guidance == 0.0) {
        eps_hat.assign(eu_v.begin(), eu_v.end());
      } else {
        Value ec = predict_noise(tape, cfg, p, z, t, cond);
        const auto& ec_v = tape.val(ec).data;
        for (size_t i = 0; i < eps_hat.size(); ++i) {
          double u = static_cast<double>(eu_v[i]);
          double c = static_cast<double>(ec_v[i]);
          eps_hat[i] = static_cast<T>(u + guidance * (c - u));
        }
      }
    }

    const double ab = sched.alpha_bar(t);
    const double sqrt_ab = std::sqrt(ab);
    const double sqrt_1mab = std::sqrt(1.0 - ab);
    const double ab_prev =
        (si + 1 < out.timesteps.size()) ? sched.alpha_bar(out.timesteps[si + 1])
                                        : 1.0;
    const double sqrt_abp = std::sqrt(ab_prev);
    const double sqrt_1mabp = std::sqrt(1.0 - ab_prev);

    for (size_t i = 0; i < out.latent.data.size(); ++i) {
      double zt = static_cast<double>(out.latent.data[i]);
      double eh = static_cast<double>(eps_hat[i]);
      double x0 = (zt - sqrt_1mab * eh) / sqrt_ab;
      if (x0 > 1.0) x0 = 1.0;
      if (x0 < -1.0) x0 = -1.0;
      out.latent.data[i] = static_cast<T>(sqrt_abp * x0 + sqrt_1mabp * eh);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image <-> latent codec
// ---------------------------------------------------------------------------

// Encode: 2x2 average pooling followed by an affine map from [0,1] to [-1,1].
// The image must be square with side 2 * latent_hw.
template <typename T>
Tensor<T> encode_image_to_latent(const Image& img, int latent_hw) {
  require(latent_hw >= 2, "latent side must be >= 2");
  require(img.width == 2 * latent_hw && img.height == 2 * latent_hw,
          "codec expects a ", 2 * latent_hw, "x", 2 * latent_hw,
          " image, got ", img.width, "x", img.height);
  Tensor<T> z(latent_hw * latent_hw, 3);
  for (int y = 0; y < latent_hw; ++y) {
    for (int x = 0; x < latent_hw; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            acc += static_cast<double>(img.pixel(2 * x + dx, 2 * y + dy)[c]);
          }
        }
        double p = acc / 4.0;
        z.at(y * latent_hw + x, c) = static_cast<T>(2.0 * p - 1.0);
      }
    }
  }
  return z;
}

// Decode: clamp to [-1,1], map back to [0,1], bilinear 2x upsample.
template <typename T>
Image decode_latent_to_image(const Tensor<T>& z, int latent_hw) {
  require(latent_hw >= 2, "latent side must be >= 2");
  require(z.rows == latent_hw * latent_hw && z.cols == 3,
          "latent must be ", latent_hw * latent_hw, " x 3, got ", z.rows,
          " x ", z.cols);
  const int side = 2 * latent_hw;
  Image img(side, side);
  auto sample = [&](int gx, int gy, int c) -> double {
    if (gx < 0) gx = 0;
    if (gy < 0) gy = 0;
    if (gx > latent_hw - 1) gx = latent_hw - 1;
    if (gy > latent_hw - 1) gy = latent_hw - 1;
    double v = static_cast<double>(z.at(gy * latent_hw + gx, c));
    if (v > 1.0) v = 1.0;
    if (v < -1.0) v = -1.0;
    return (v + 1.0) * 0.5;
  };
  for (int y = 0; y < side; ++y) {
    double fy = (static_cast<double>(y) + 0.5) / 2.0 - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - static_cast<double>(y0);
    for (int x = 0; x < side; ++x) {
      double fx = (static_cast<double>(x) + 0.5) / 2.0 - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - static_cast<double>(x0);
      for (int c = 0; c < 3; ++c) {
        double v00 = sample(x0, y0, c);
        double v10 = sample(x0 + 1, y0, c);
        double v01 = sample(x0, y0 + 1, c);
        double v11 = sample(x0 + 1, y0 + 1, c);
        double v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v10) +
                   wy * ((1.0 - wx) * v01 + wx * v11);
        img.pixel(x, y)[c] = static_cast<float>(v);
      }
    }
  }
  return img;
}

}  // namespace neti
