#pragma once
// Post-hoc analyses of an inverted concept against its frozen generator:
// conditioning decomposition over the denoising trajectory, truncation
// sweeps of the ordered hidden representation, and style mixing between two
// concepts. Every analysis is read-only — it reuses the deterministic
// sampler and never changes a weight.

#include <optional>
#include <string>
#include <vector>

#include "neti/bundle.hpp"
#include "neti/evalmetrics.hpp"

namespace neti {

// Samples with the conditioning frozen at one query timestep: the concept is
// queried once at `fixed_t`, and the resulting per-layer (key, value)
// tensors are reused as constants at every sampling step. The builder-call
// counter still advances once per step, so instrumentation stays comparable
// with ordinary sampling.
SampleResult<float> decompose_timestep(GeneratorBundle& bundle,
                                       ConceptModel& cm,
                                       const TokenizedPrompt& toks, int steps,
                                       double guidance, double fixed_t,
                                       std::optional<int> truncation,
                                       uint64_t noise_seed);

struct SweepEntry {
  int k = 0;
  Image image;
  double score = 0.0;  // similarity to the concept's training images
};

struct SweepResult {
  std::vector<SweepEntry> entries;
};

// One sample per truncation width in `ks` — the width is pinned for every
// query of its run and all runs share the same initial noise — scored
// against the concept's training images under the frozen extractor. Widths
// outside [1, hidden] are rejected.
SweepResult truncation_sweep(GeneratorBundle& bundle, ConceptModel& cm,
                             const TokenizedPrompt& toks,
                             const std::vector<int>& ks, int steps,
                             double guidance, uint64_t noise_seed,
                             const std::vector<Image>& concept_images,
                             const FrozenFeatureExtractor& fx);

// Style mixing: while the sampler is above `mix_start_t` every layer is
// conditioned by the geometry concept; at and below it, only the layers in
// `geometry_layers` stay on geometry and the rest switch to the appearance
// concept. A layer's key and value always come from the same concept.
// Degenerate settings that never engage one concept warn on stderr rather
// than error.
Image style_mix(GeneratorBundle& bundle, ConceptModel& geometry,
                ConceptModel& appearance, const TokenizedPrompt& toks,
                int steps, double guidance, double mix_start_t,
                std::vector<int> geometry_layers, uint64_t noise_seed);

// Default geometry-owned layers: the first and the deepest blocks.
std::vector<int> default_geometry_layers(const DenoiserConfig& cfg);

// CSV writers: one header row, then one "<key>,<score>" row per entry.
void save_sweep_csv(const std::string& path, const SweepResult& sweep);
void save_decompose_csv(const std::string& path,
                        const std::vector<std::pair<double, double>>& rows);

// Tiles equally-sized images into one row-major grid.
Image tile_images(const std::vector<Image>& images, int cols);

}  // namespace neti
