#pragma once

// The frozen generator bundle (denoiser + text encoder + vocabulary +
// schedule), the concept model produced by inversion, their on-disk formats,
// and the conditioning builders that connect the concept to the denoiser's
// per-layer cross-attention.

#include <optional>
#include <string>
#include <vector>

#include "neti/diffusion.hpp"
#include "neti/mapper.hpp"
#include "neti/textenc.hpp"
#include "neti/weightfile.hpp"

namespace neti {

// ---------------------------------------------------------------------------
// Inversion modes
// ---------------------------------------------------------------------------

enum class InversionMode {
  Neti,           // space-time mapper, no bypass
  NetiBypass,     // space-time mapper + textual bypass head
  TiBaseline,     // single directly-optimized embedding vector
  AblateNoTime,   // mapper with the timestep input fixed (per-layer only)
  AblateNoSpace,  // mapper with the layer input fixed (per-timestep only)
  AblateNeither,  // mapper with both inputs fixed (constant input)
};

const char* inversion_mode_name(InversionMode m);
InversionMode inversion_mode_from_name(const std::string& s);

inline bool mode_uses_mapper(InversionMode m) {
  return m != InversionMode::TiBaseline;
}

inline QueryMode query_mode_for(InversionMode m) {
  switch (m) {
    case InversionMode::AblateNoTime: return QueryMode::FixedTime;
    case InversionMode::AblateNoSpace: return QueryMode::FixedSpace;
    case InversionMode::AblateNeither: return QueryMode::FixedBoth;
    default: return QueryMode::Full;
  }
}

// ---------------------------------------------------------------------------
// Generator bundle
// ---------------------------------------------------------------------------

struct GeneratorBundle {
  double beta_start = 1e-4;
  double beta_end = 0.02;
  NoiseSchedule schedule;
  Vocab vocab;
  TextEncoderParams<float> text;
  DenoiserParams<float> den;
  bool uncond_trained = false;

  const TextEncoderConfig& tcfg() const { return text.cfg; }
  const DenoiserConfig& dcfg() const { return den.cfg; }

  // Marks every generator parameter as frozen (no gradients recorded).
  void freeze();
};

// Fresh, untrained toy-preset bundle.
GeneratorBundle make_toy_bundle(uint64_t seed);

// All generator weights as named sections ("textenc.*" and "denoiser.*").
std::vector<WeightSection> bundle_sections(GeneratorBundle& b);

// SHA-256 over the canonical serialization (weight sections + metadata).
// Stable across save/load round trips; changes iff any weight or metadata
// bit changes.
std::string bundle_hash(GeneratorBundle& b);

// Writes <path> (weight file) and <path>.json (metadata sidecar).
void save_bundle(const std::string& path, GeneratorBundle& b);
GeneratorBundle load_bundle(const std::string& path);

// ---------------------------------------------------------------------------
// Concept model (inversion output)
// ---------------------------------------------------------------------------

struct ConceptModel {
  InversionMode mode = InversionMode::Neti;
  MapperParams<float> mapper;    // present unless mode == TiBaseline
  Tensor<float> ti_vector;       // 1 x D, TiBaseline only
  std::string super_category = "shape";
  double alpha = 0.2;

  std::vector<std::pair<std::string, Tensor<float>*>> trainable_named();
  void set_requires_grad(bool on);
};

// Builds an initialized concept model for the given mode against the bundle.
// base_cfg supplies mapper dimensions; bypass and query_mode are derived
// from the mode. TiBaseline initializes from the super-category embedding.
ConceptModel make_concept_model(InversionMode mode, GeneratorBundle& bundle,
                                const MapperConfig& base_cfg,
                                const std::string& super_category, double alpha,
                                uint64_t seed);

// Writes <path> (weight file; mapper sections or "ti.v") and <path>.json.
void save_concept(const std::string& path, ConceptModel& c);
ConceptModel load_concept(const std::string& path);

// Copy of the embedding-table row for a vocabulary token (1 x D).
Tensor<float> super_embedding(const GeneratorBundle& b, const std::string& token);

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

// Builds the per-layer (key, value) conditioning for prompt `toks` at
// timestep t. `cm` may be null only when the prompt has no placeholder.
// Keys always come from the base (encoder-mediated) pathway; values carry
// the bypass contribution when the concept uses it.
std::vector<LayerConditioning> build_conditioning(
    Tape<float>& tape, GeneratorBundle& bundle, ConceptModel* cm,
    const TokenizedPrompt& toks, double t, std::optional<int> truncation);

// Evaluates build_conditioning once on a scratch tape and returns the
// resulting tensors, for reuse as constants across sampling steps.
CachedConditioning<float> materialize_conditioning(GeneratorBundle& bundle,
                                                   ConceptModel* cm,
                                                   const TokenizedPrompt& toks,
                                                   double t,
                                                   std::optional<int> truncation);

// Conditioning for the empty (unconditional) prompt; timestep-independent.
CachedConditioning<float> uncond_conditioning(GeneratorBundle& bundle);

// Step builder for the sampler: queries the concept at each visited
// timestep. The referenced bundle/concept/toks must outlive the builder.
CondBuilder<float> concept_builder(GeneratorBundle& bundle, ConceptModel* cm,
                                   const TokenizedPrompt& toks,
                                   std::optional<int> truncation);

// Convenience wrapper: deterministic sampling from seed-derived noise.
SampleResult<float> sample_with_concept(GeneratorBundle& bundle,
                                        ConceptModel* cm,
                                        const TokenizedPrompt& toks, int steps,
                                        double guidance,
                                        std::optional<int> truncation,
                                        uint64_t noise_seed);

}  // namespace neti
