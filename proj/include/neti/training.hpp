#pragma once

// Generator pretraining and concept inversion. The generator is trained once
// on the procedural corpus (with caption dropout so an unconditional pathway
// exists), then frozen; inversion optimizes only the concept model against
// the frozen generator.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neti/bundle.hpp"
#include "neti/data.hpp"
#include "neti/diffusion.hpp"

namespace neti {

// ---------------------------------------------------------------------------
// Denoising objective
// ---------------------------------------------------------------------------

// ||eps - predict_noise(add_noise(z0, eps, t), t, cond)||^2 (mean square),
// built on the tape so gradients flow into whatever `cond` depends on.
template <typename T>
Value denoising_loss_graph(Tape<T>& tape, const DenoiserConfig& cfg,
                           DenoiserParams<T>& den, const NoiseSchedule& sched,
                           const Tensor<T>& z0, const Tensor<T>& eps, int t,
                           const std::vector<LayerConditioning>& cond) {
  Tensor<T> zt = add_noise(sched, z0, eps, t);
  Value z = tape.constant(std::move(zt));
  Value eps_ref = tape.constant(eps);
  Value eps_hat = predict_noise(tape, cfg, den, z, t, cond);
  return tape.mse(eps_hat, eps_ref);
}

// Convenience wrapper over a bundle + concept prompt.
Value denoising_loss(Tape<float>& tape, GeneratorBundle& bundle,
                     ConceptModel* cm, const TokenizedPrompt& toks,
                     const Tensor<float>& z0, const Tensor<float>& eps, int t,
                     std::optional<int> truncation);

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int steps = 20000;
  int batch_size = 4;
  double lr = 1e-3;
  double caption_dropout = 0.1;  // fraction of examples trained unconditionally
  uint64_t seed = 0;
  int probe_size = 32;     // fixed (image, t, eps) triples for the loss probe
  int log_every = 0;       // 0 = silent
};

struct TraceRow {
  int step = 0;
  double raw_loss = 0.0;
  double smoothed_loss = 0.0;  // trailing 50-step mean
};

struct PretrainReport {
  double init_probe_loss = 0.0;   // held-in caption loss before training
  double final_probe_loss = 0.0;  // same probe set after training
  std::string bundle_hash;        // hash of the frozen result
  std::vector<TraceRow> trace;
};

// Jointly trains denoiser + text encoder + embedding table on the corpus,
// then freezes the bundle. Aborts with a diagnostic if the loss diverges.
GeneratorBundle pretrain_generator(const ProceduralCorpus& corpus,
                                   const PretrainConfig& cfg,
                                   PretrainReport* report = nullptr);

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

struct TrainConfig {
  InversionMode mode = InversionMode::Neti;
  int steps = 500;
  int batch_size = 2;
  int grad_accum = 4;
  double base_lr = 0.001;
  double effective_lr = 0.008;  // must equal base_lr * batch_size * grad_accum
  double dropout_prob = 0.5;
  double alpha = 0.2;
  uint64_t seed = 0;
  MapperConfig mapper;          // dimensions; bypass/query_mode follow `mode`
  int checkpoint_every = 0;     // 0 = only the final weights
  std::string checkpoint_dir;   // required when checkpoint_every > 0
  bool debug_checks = false;    // per-step frozen-parameter gradient assert

  void validate() const;
};

struct InversionResult {
  ConceptModel cm;
  std::vector<TraceRow> trace;
};

// One per-example truncation draw: with probability `prob` the hidden vector
// is truncated to a width drawn uniformly from {1..hidden}; otherwise the
// full width is kept (no truncation). The width is drawn either way so the
// stream stays aligned regardless of the coin's outcome.
std::optional<int> draw_truncation(Rng& rng, double prob, int hidden);

// Optimizes a concept model against the frozen bundle. Every per-example
// draw (image, t, eps, truncation) comes from one seeded stream, so the
// full loss trace is reproducible bit-for-bit. The bundle hash must be
// unchanged afterwards; any generator weight delta is a hard failure.
InversionResult invert_concept(GeneratorBundle& bundle,
                               const ConceptDataset& dataset,
                               const TrainConfig& cfg);

// Trailing-mean smoothing used for loss traces (window = 50 steps).
std::vector<TraceRow> smooth_trace(const std::vector<double>& raw);

// Writes a trace as CSV: "step,raw_loss,smoothed_loss".
void save_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

}  // namespace neti
