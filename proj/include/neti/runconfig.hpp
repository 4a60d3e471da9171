#pragma once
// Resolved run configuration shared by every CLI command. Resolution
// precedence is flags > config file > preset defaults; unknown keys and type
// mismatches in a config file are errors, and every successful run writes
// its fully-resolved configuration next to its outputs.

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neti/mapper.hpp"
#include "neti/training.hpp"

namespace neti {

struct RunConfig {
  std::string preset = "toy";

  // Generator / text geometry.
  int context = 12;  // prompt length N
  int dim = 64;      // embedding width D
  int layers = 4;    // conditioned attention layers L

  // Mapper geometry.
  int hidden = 128;      // ordered hidden width d_h
  int freqs = 64;        // random Fourier frequencies F
  int time_anchors = 10; // anchor timesteps per layer (A = layers * this)
  double sigma_t = 0.03;
  double sigma_l = 2.0;
  bool bypass = false;
  double alpha = 0.2;

  // Sampling.
  int sample_steps = 50;
  double guidance = 1.0;
  std::optional<int> truncation;
  int sample_count = 4;  // images per sample/eval invocation

  // Inversion.
  std::string mode = "neti";
  int train_steps = 500;
  int batch_size = 2;
  int grad_accum = 4;
  double base_lr = 0.001;
  std::optional<double> effective_lr;  // must equal base*batch*accum if given
  double dropout_prob = 0.5;
  int checkpoint_every = 0;
  bool debug_checks = false;

  // Pretraining.
  int pretrain_steps = 20000;
  int pretrain_batch = 4;
  double pretrain_lr = 1e-3;
  double caption_dropout = 0.1;
  int probe_size = 32;

  // Data generation.
  int count = 64;

  // Common inputs/outputs.
  uint64_t seed = 0;
  std::string out;
  std::string bundle_path;
  std::string mapper_path;
  std::string concept_dir;
  std::string corpus_dir;
  std::string prompt;

  // Analysis.
  std::vector<double> fixed_t = {999.0, 666.0, 333.0, 50.0};
  std::vector<double> mix_start_t = {800.0};
  std::vector<int> geometry_layers;  // empty = generator default
  std::vector<int> ks = {8, 16, 32, 64, 128};
  std::string appearance_mapper_path;

  // Derived module configs.
  MapperConfig mapper_config() const;
  TrainConfig train_config() const;
  PretrainConfig pretrain_config() const;

  // Fully-resolved form written to each run directory.
  nlohmann::json to_json() const;

  void validate() const;
};

// Flag-level overrides collected by the CLI; unset fields defer to the
// config file and preset. `steps` is routed by the caller into the
// command-appropriate field before resolution.
struct FlagOverrides {
  std::optional<std::string> preset, config, mode, out, bundle, mapper,
      appearance_mapper, concept_dir, corpus_dir, prompt;
  std::optional<uint64_t> seed;
  std::optional<int> sample_steps, train_steps, pretrain_steps, truncation,
      count, sample_count, checkpoint_every;
  std::optional<double> guidance, alpha;
  std::optional<bool> bypass, debug_checks;
  std::optional<std::vector<double>> fixed_t, mix_start_t;
  std::optional<std::vector<int>> geometry_layers, ks;
};

// Preset defaults by name ("toy" or "paper").
RunConfig preset_config(const std::string& name);

// Applies a config-file JSON object onto `cfg`. Unknown keys and type
// mismatches fail with a diagnostic naming the key.
void apply_config_json(RunConfig& cfg, const nlohmann::json& file);

// Full resolution: preset defaults, then the config file (if any), then
// flag overrides; validates the result.
RunConfig resolve_config(const FlagOverrides& flags);

}  // namespace neti
