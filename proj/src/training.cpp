#include "neti/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "neti/optim.hpp"
#include "neti/weightfile.hpp"

namespace neti {

namespace {

namespace fs = std::filesystem;

// Shortest round-trippable decimal form of a double, for CSV output.
std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  double back = std::strtod(buf, nullptr);
  if (back == x) {
    // Try trimming to the shortest representation that still round-trips.
    for (int prec = 1; prec < 17; ++prec) {
      char probe[64];
      std::snprintf(probe, sizeof(probe), "%.*g", prec, x);
      if (std::strtod(probe, nullptr) == x) return probe;
    }
  }
  return buf;
}

double scalar(const Tape<float>& tape, Value v) {
  const Tensor<float>& t = tape.val(v);
  require(t.rows == 1 && t.cols == 1, "expected a scalar loss, got ", t.rows,
          " x ", t.cols);
  return static_cast<double>(t.at(0, 0));
}

// Hard check that no generator parameter accumulated a gradient. Frozen
// tensors never receive gradients from the tape, so any nonzero entry here
// means the freeze was violated.
void assert_generator_frozen(GeneratorBundle& bundle) {
  auto check = [](const Tensor<float>& t, const std::string& what) {
    for (float g : t.grad) {
      if (g != 0.0f) {
        fail("frozen generator parameter received a gradient: ", what);
      }
    }
  };
  for (Tensor<float>* p : bundle.text.trainable()) {
    check(*p, "text encoder");
  }
  for (auto& [name, p] : bundle.den.trainable()) {
    check(*p, name);
  }
}

void scale_grads(const std::vector<Tensor<float>*>& params, double scale) {
  for (Tensor<float>* p : params) {
    if (p->grad.empty()) continue;
    for (float& g : p->grad) {
      g = static_cast<float>(g * scale);
    }
  }
}

void zero_grads(const std::vector<Tensor<float>*>& params) {
  for (Tensor<float>* p : params) {
    p->zero_grad();
  }
}

}  // namespace

Value denoising_loss(Tape<float>& tape, GeneratorBundle& bundle,
                     ConceptModel* cm, const TokenizedPrompt& toks,
                     const Tensor<float>& z0, const Tensor<float>& eps, int t,
                     std::optional<int> truncation) {
  std::vector<LayerConditioning> cond = build_conditioning(
      tape, bundle, cm, toks, static_cast<double>(t), truncation);
  return denoising_loss_graph(tape, bundle.dcfg(), bundle.den, bundle.schedule,
                              z0, eps, t, cond);
}

std::optional<int> draw_truncation(Rng& rng, double prob, int hidden) {
  require(hidden >= 1, "draw_truncation: hidden must be positive");
  const bool apply = rng.uniform() < prob;
  const int width = static_cast<int>(rng.below(static_cast<uint64_t>(hidden))) + 1;
  if (!apply) return std::nullopt;
  return width;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

GeneratorBundle pretrain_generator(const ProceduralCorpus& corpus,
                                   const PretrainConfig& cfg,
                                   PretrainReport* report) {
  require(cfg.steps >= 0, "pretrain: steps must be >= 0");
  require(cfg.batch_size > 0, "pretrain: batch_size must be positive");
  require(cfg.caption_dropout >= 0.0 && cfg.caption_dropout <= 1.0,
          "pretrain: caption_dropout must lie in [0, 1]");
  require(cfg.probe_size > 0, "pretrain: probe_size must be positive");
  require(!corpus.examples.empty(), "pretrain: corpus is empty");

  GeneratorBundle bundle = make_toy_bundle(cfg.seed);
  const int n = static_cast<int>(corpus.examples.size());
  const int lat_rows = bundle.dcfg().pixels();
  const int lat_cols = bundle.dcfg().channels_in;

  // Encode every image and tokenize every caption once up front.
  std::vector<Tensor<float>> latents;
  std::vector<TokenizedPrompt> prompts;
  latents.reserve(n);
  prompts.reserve(n);
  for (const CorpusExample& ex : corpus.examples) {
    latents.push_back(
        encode_image_to_latent<float>(ex.image, bundle.dcfg().latent_hw));
    prompts.push_back(tokenize(ex.caption, bundle.vocab, bundle.tcfg().context));
  }
  const TokenizedPrompt empty_prompt =
      tokenize("", bundle.vocab, bundle.tcfg().context);

  // Fixed probe set: (image, timestep, noise) triples drawn from a dedicated
  // stream, evaluated with the example's own caption (no dropout). The same
  // triples measure the loss before and after training.
  struct ProbeCase {
    int idx;
    int t;
    Tensor<float> eps;
  };
  std::vector<ProbeCase> probe;
  {
    Rng probe_rng = Rng(cfg.seed).fork(77);
    probe.reserve(cfg.probe_size);
    for (int i = 0; i < cfg.probe_size; ++i) {
      ProbeCase pc;
      pc.idx = static_cast<int>(probe_rng.below(static_cast<uint64_t>(n)));
      pc.t = static_cast<int>(probe_rng.below(1000));
      pc.eps = Tensor<float>::randn(lat_rows, lat_cols, probe_rng);
      probe.push_back(std::move(pc));
    }
  }
  auto probe_loss = [&]() {
    double total = 0.0;
    for (const ProbeCase& pc : probe) {
      Tape<float> tape;
      Value loss = denoising_loss(tape, bundle, nullptr, prompts[pc.idx],
                                  latents[pc.idx], pc.eps, pc.t, std::nullopt);
      total += scalar(tape, loss);
    }
    return total / static_cast<double>(probe.size());
  };

  bundle.text.set_requires_grad(true);
  bundle.den.set_requires_grad(true);
  std::vector<Tensor<float>*> params = bundle.text.trainable();
  for (auto& [name, p] : bundle.den.trainable()) {
    params.push_back(p);
  }

  const double init_probe = probe_loss();

  Adam<float> opt(params);
  Rng draws = Rng(cfg.seed).fork(1);
  std::vector<double> raw;
  raw.reserve(cfg.steps);

  for (int step = 0; step < cfg.steps; ++step) {
    zero_grads(params);
    double acc = 0.0;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int idx = static_cast<int>(draws.below(static_cast<uint64_t>(n)));
        const int t = static_cast<int>(draws.below(1000));
        Tensor<float> eps = Tensor<float>::randn(lat_rows, lat_cols, draws);
        const bool drop = draws.uniform() < cfg.caption_dropout;
        Tape<float> tape;
        Value loss =
            denoising_loss(tape, bundle, nullptr,
                           drop ? empty_prompt : prompts[idx], latents[idx],
                           eps, t, std::nullopt);
        tape.backward(loss);
        acc += scalar(tape, loss);
      }
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      if (msg.find("non-finite") != std::string::npos) {
        fail("pretraining diverged at step ", step, ": ", msg);
      }
      throw;
    }
    const double mean_loss = acc / static_cast<double>(cfg.batch_size);
    if (!std::isfinite(mean_loss)) {
      fail("pretraining diverged at step ", step, ": loss is not finite");
    }
    scale_grads(params, 1.0 / static_cast<double>(cfg.batch_size));
    opt.step(cfg.lr);
    raw.push_back(mean_loss);
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      std::fprintf(stderr, "pretrain step %d/%d loss %.6f\n", step + 1,
                   cfg.steps, mean_loss);
    }
  }

  const double final_probe = probe_loss();

  // The unconditional pathway only exists when training actually mixed in
  // caption-dropped examples.
  bundle.uncond_trained = cfg.caption_dropout > 0.0 && cfg.steps > 0;
  bundle.freeze();
  if (report != nullptr) {
    report->init_probe_loss = init_probe;
    report->final_probe_loss = final_probe;
    report->bundle_hash = bundle_hash(bundle);
    report->trace = smooth_trace(raw);
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  require(steps >= 0, "TrainConfig: steps must be >= 0");
  require(batch_size > 0, "TrainConfig: batch_size must be positive");
  require(grad_accum > 0, "TrainConfig: grad_accum must be positive");
  require(dropout_prob >= 0.0 && dropout_prob <= 1.0,
          "TrainConfig: dropout_prob must lie in [0, 1]");
  require(alpha >= 0.0, "TrainConfig: alpha must be >= 0");
  const double expect = base_lr * batch_size * grad_accum;
  const double tol = 1e-12 * std::max(1.0, std::abs(expect));
  require(std::abs(effective_lr - expect) <= tol, "TrainConfig: effective_lr (",
          effective_lr, ") must equal base_lr * batch_size * grad_accum (",
          expect, ")");
  if (checkpoint_every > 0) {
    require(!checkpoint_dir.empty(),
            "TrainConfig: checkpoint_dir is required when checkpoint_every > 0");
  }
}

InversionResult invert_concept(GeneratorBundle& bundle,
                               const ConceptDataset& dataset,
                               const TrainConfig& cfg) {
  cfg.validate();
  dataset.validate(bundle.vocab, bundle.tcfg().context);
  bundle.freeze();
  const std::string pre_hash = bundle_hash(bundle);

  InversionResult res;
  res.cm = make_concept_model(cfg.mode, bundle, cfg.mapper,
                              dataset.super_category, cfg.alpha, cfg.seed);

  const TokenizedPrompt toks =
      tokenize(dataset.caption_template, bundle.vocab, bundle.tcfg().context);
  require(toks.placeholder_pos.has_value(),
          "invert_concept: caption template must mention the concept token");

  const int lat_rows = bundle.dcfg().pixels();
  const int lat_cols = bundle.dcfg().channels_in;
  std::vector<Tensor<float>> latents;
  latents.reserve(dataset.images.size());
  for (const Image& img : dataset.images) {
    latents.push_back(
        encode_image_to_latent<float>(img, bundle.dcfg().latent_hw));
  }
  const int n = static_cast<int>(latents.size());

  res.cm.set_requires_grad(true);
  std::vector<Tensor<float>*> params;
  for (auto& [name, p] : res.cm.trainable_named()) {
    params.push_back(p);
  }
  require(!params.empty(), "invert_concept: concept model has no parameters");

  if (cfg.steps == 0) {
    require(bundle_hash(bundle) == pre_hash,
            "invert_concept: generator weights changed");
    return res;
  }

  // Truncation applies only to modes with a hidden representation to cut.
  const bool draws_truncation = mode_uses_mapper(cfg.mode);

  Adam<float> opt(params);
  Rng draws = Rng(cfg.seed).fork(1);
  std::vector<double> raw;
  raw.reserve(cfg.steps);

  for (int step = 0; step < cfg.steps; ++step) {
    zero_grads(params);
    double acc = 0.0;
    try {
      for (int a = 0; a < cfg.grad_accum; ++a) {
        for (int b = 0; b < cfg.batch_size; ++b) {
          // Fixed per-example draw order: image, timestep, noise, truncation.
          const int idx =
              static_cast<int>(draws.below(static_cast<uint64_t>(n)));
          const int t = static_cast<int>(draws.below(1000));
          Tensor<float> eps = Tensor<float>::randn(lat_rows, lat_cols, draws);
          // One truncation per example, shared by every layer query.
          std::optional<int> trunc;
          if (draws_truncation) {
            trunc = draw_truncation(draws, cfg.dropout_prob, cfg.mapper.hidden);
          }
          Tape<float> tape;
          Value loss = denoising_loss(tape, bundle, &res.cm, toks,
                                      latents[idx], eps, t, trunc);
          tape.backward(loss);
          acc += scalar(tape, loss);
          if (cfg.debug_checks) {
            assert_generator_frozen(bundle);
          }
        }
      }
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      if (msg.find("non-finite") != std::string::npos) {
        fail("inversion diverged at step ", step, ": ", msg);
      }
      throw;
    }
    const double scale =
        1.0 / static_cast<double>(cfg.batch_size * cfg.grad_accum);
    const double mean_loss = acc * scale;
    if (!std::isfinite(mean_loss)) {
      fail("inversion diverged at step ", step, ": loss is not finite");
    }
    scale_grads(params, scale);
    opt.step(cfg.effective_lr);
    raw.push_back(mean_loss);

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      fs::create_directories(cfg.checkpoint_dir);
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.weights", step + 1);
      save_concept((fs::path(cfg.checkpoint_dir) / name).string(), res.cm);
    }
  }

  require(bundle_hash(bundle) == pre_hash,
          "invert_concept: generator weights changed during inversion");
  res.trace = smooth_trace(raw);
  return res;
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

std::vector<TraceRow> smooth_trace(const std::vector<double>& raw) {
  constexpr int kWindow = 50;
  std::vector<TraceRow> out;
  out.reserve(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const size_t lo = (i + 1 >= kWindow) ? i + 1 - kWindow : 0;
    double sum = 0.0;
    for (size_t j = lo; j <= i; ++j) {
      sum += raw[j];
    }
    TraceRow row;
    row.step = static_cast<int>(i);
    row.raw_loss = raw[i];
    row.smoothed_loss = sum / static_cast<double>(i - lo + 1);
    out.push_back(row);
  }
  return out;
}

void save_trace_csv(const std::string& path,
                    const std::vector<TraceRow>& trace) {
  std::ostringstream csv;
  csv << "step,raw_loss,smoothed_loss\n";
  for (const TraceRow& r : trace) {
    csv << r.step << ',' << format_double(r.raw_loss) << ','
        << format_double(r.smoothed_loss) << '\n';
  }
  write_text_atomic(path, csv.str());
}

}  // namespace neti
